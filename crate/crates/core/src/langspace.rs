//! The vision-to-language mapper (frozen), the trainable projection head,
//! and the frozen reference encoder used by the distillation regularizer.
//!
//! The mapper treats the P*P cells of a pooled feature as tokens, runs one
//! self-attention block over them, mean-pools, and applies a two-layer MLP
//! into the language space. Its weights come from a fixed seed and never
//! receive gradients: during training it is bound as constant leaves, so the
//! update rule cannot touch it even in principle, while gradients still flow
//! through it into the backbone.

use ndarray::ArrayD;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::detector::{backbone_forward, FeatureMap};
use crate::error::Result;
use crate::params::{bind, Binding, ParamStore};
use crate::rng;

/// Seeded mapper weights. Kept in their own store so the trainer can
/// checksum them and bind them as constants.
pub fn init_v2l(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut r = rng::rng_for(seed, 0x721);
    let dv = cfg.feature_dim();
    let da = cfg.attn_dim;
    let dh = cfg.v2l_hidden;
    let dl = cfg.lang_dim;
    let mut store = ParamStore::new();
    let s_in = (1.0 / dv as f64).sqrt();
    store.insert("v2l.wq", rng::randn_array(&[dv, da], s_in, &mut r));
    store.insert("v2l.wk", rng::randn_array(&[dv, da], s_in, &mut r));
    store.insert("v2l.wv", rng::randn_array(&[dv, da], s_in, &mut r));
    store.insert("v2l.fc1.w", rng::randn_array(&[da, dh], (2.0 / da as f64).sqrt(), &mut r));
    store.insert("v2l.fc1.b", ArrayD::zeros(vec![dh]));
    store.insert("v2l.fc2.w", rng::randn_array(&[dh, dl], (1.0 / dh as f64).sqrt(), &mut r));
    store.insert("v2l.fc2.b", ArrayD::zeros(vec![dl]));
    store
}

/// Map one token matrix (T, D_v) to a language-space row (1, D_l).
pub fn v2l_forward_tokens(tape: &mut Tape, v2l: &Binding, cfg: &ModelConfig, tokens: Var) -> Var {
    let q = tape.matmul(tokens, v2l.var("v2l.wq"));
    let k = tape.matmul(tokens, v2l.var("v2l.wk"));
    let v = tape.matmul(tokens, v2l.var("v2l.wv"));
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scores = tape.scale(scores, 1.0 / (cfg.attn_dim as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let mixed = tape.matmul(attn, v);
    let pooled = tape.mean_rows(mixed);
    let h = tape.matmul(pooled, v2l.var("v2l.fc1.w"));
    let h = tape.add_row_bias(h, v2l.var("v2l.fc1.b"));
    let h = tape.relu(h);
    let out = tape.matmul(h, v2l.var("v2l.fc2.w"));
    tape.add_row_bias(out, v2l.var("v2l.fc2.b"))
}

/// Map every sample of a (B, C, P, P) tensor through the mapper, producing
/// (B, D_l). Used for RoI region features and for whole-image pooled maps.
pub fn v2l_map_regions(tape: &mut Tape, v2l: &Binding, cfg: &ModelConfig, regions: Var) -> Var {
    let b = tape.value(regions).shape()[0];
    let rows: Vec<Var> = (0..b)
        .map(|i| {
            let tokens = tape.take_tokens(regions, i);
            v2l_forward_tokens(tape, v2l, cfg, tokens)
        })
        .collect();
    tape.concat_rows(&rows)
}

/// Trainable projection head weights (two linear layers).
pub fn init_projection(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut r = rng::rng_for(seed, 0x90);
    let mut store = ParamStore::new();
    store.insert(
        "proj.fc1.w",
        rng::randn_array(&[cfg.lang_dim, cfg.proj_hidden], (2.0 / cfg.lang_dim as f64).sqrt(), &mut r),
    );
    store.insert("proj.fc1.b", ArrayD::zeros(vec![cfg.proj_hidden]));
    store.insert(
        "proj.fc2.w",
        rng::randn_array(&[cfg.proj_hidden, cfg.proj_dim], (1.0 / cfg.proj_hidden as f64).sqrt(), &mut r),
    );
    store.insert("proj.fc2.b", ArrayD::zeros(vec![cfg.proj_dim]));
    store
}

/// The projection head g: (R, D_l) -> (R, D_p).
pub fn project(tape: &mut Tape, proj: &Binding, z: Var) -> Var {
    let h = tape.matmul(z, proj.var("proj.fc1.w"));
    let h = tape.add_row_bias(h, proj.var("proj.fc1.b"));
    let h = tape.relu(h);
    let out = tape.matmul(h, proj.var("proj.fc2.w"));
    tape.add_row_bias(out, proj.var("proj.fc2.b"))
}

/// Deep-copy the backbone weights into an immutable reference encoder.
pub fn freeze_snapshot(trainable: &ParamStore) -> ParamStore {
    trainable.subset("backbone.")
}

/// Forward through the frozen reference encoder. Identical computation to
/// `backbone_forward`; the binding is constant so no gradient can reach it.
pub fn reference_encode(
    tape: &mut Tape,
    reference: &ParamStore,
    cfg: &ModelConfig,
    images: &ndarray::Array4<f64>,
) -> Result<FeatureMap> {
    let binding = bind(tape, reference, false);
    backbone_forward(tape, &binding, cfg, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::init_detector;
    use ndarray::{Array4, ArrayD};

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone_channels: [4, 6, 8, 8],
            lang_dim: 16,
            attn_dim: 8,
            v2l_hidden: 12,
            proj_hidden: 10,
            proj_dim: 256,
            ..ModelConfig::default()
        }
    }

    fn random_regions(tape: &mut Tape, b: usize, c: usize, p: usize, seed: u64) -> Var {
        let mut r = rng::rng_from(seed);
        tape.param(rng::randn_array(&[b, c, p, p], 1.0, &mut r))
    }

    #[test]
    fn v2l_is_deterministic() {
        let cfg = cfg();
        let store = init_v2l(&cfg, 5);
        let run = || {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &store, false);
            let regions = {
                let mut r = rng::rng_from(9);
                tape.leaf(rng::randn_array(&[3, 8, 4, 4], 1.0, &mut r))
            };
            let out = v2l_map_regions(&mut tape, &b, &cfg, regions);
            tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn v2l_gradient_flows_to_input_not_weights() {
        let cfg = cfg();
        let store = init_v2l(&cfg, 5);
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &store, false);
        let regions = random_regions(&mut tape, 2, 8, 4, 3);
        let out = v2l_map_regions(&mut tape, &binding, &cfg, regions);
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss);
        let g_in = grads.get(regions).expect("input gradient must exist");
        assert!(g_in.iter().any(|v| v.abs() > 1e-9));
        for (_, var) in binding.iter() {
            assert!(grads.get(*var).is_none(), "frozen weight received a gradient");
        }
    }

    #[test]
    fn v2l_input_gradient_matches_finite_differences() {
        let cfg = cfg();
        let store = init_v2l(&cfg, 7);
        let mut r0 = rng::rng_from(11);
        let x0 = rng::randn_array(&[1, 8, 4, 4], 0.7, &mut r0);
        let f = |x: &ArrayD<f64>| -> f64 {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &store, false);
            let xv = tape.leaf(x.clone());
            let out = v2l_map_regions(&mut tape, &b, &cfg, xv);
            tape.value(out).iter().enumerate().map(|(i, v)| v * ((i as f64) * 0.37).sin()).sum()
        };
        let mut tape = Tape::new();
        let b = bind(&mut tape, &store, false);
        let xv = tape.param(x0.clone());
        let out = v2l_map_regions(&mut tape, &b, &cfg, xv);
        let mut w = ArrayD::zeros(tape.value(out).raw_dim());
        for (i, v) in w.iter_mut().enumerate() {
            *v = ((i as f64) * 0.37).sin();
        }
        let wn = tape.leaf(w);
        let prod = tape.mul(out, wn);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let g = grads.get(xv).unwrap();

        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        let mut xp = x0.clone();
        for idx in 0..x0.len() {
            let orig = x0.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = g.as_slice().unwrap()[idx];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }

    #[test]
    fn projection_outputs_proj_dim_and_zero_weights_give_zero() {
        let cfg = cfg();
        let store = init_projection(&cfg, 1);
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &store, true);
        let mut r = rng::rng_from(2);
        let z = tape.leaf(rng::randn_array(&[5, 16], 1.0, &mut r));
        let h = project(&mut tape, &binding, z);
        assert_eq!(tape.value(h).shape(), &[5, 256]);

        let mut zeroed = ParamStore::new();
        for (name, v) in store.iter() {
            zeroed.insert(name, ArrayD::zeros(v.raw_dim()));
        }
        let mut tape2 = Tape::new();
        let b2 = bind(&mut tape2, &zeroed, true);
        let z2 = tape2.leaf(rng::randn_array(&[2, 16], 1.0, &mut r));
        let h2 = project(&mut tape2, &b2, z2);
        assert!(tape2.value(h2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn snapshot_is_immutable_copy() {
        let cfg = cfg();
        let mut store = init_detector(&cfg, 3);
        let reference = freeze_snapshot(&store);
        let before = reference.checksum();

        // live update must not leak into the snapshot
        let w = store.get_mut("backbone.conv1.w").unwrap();
        w.mapv_inplace(|v| v + 1.0);
        assert_eq!(reference.checksum(), before);

        // right after the snapshot the two encoders agree on any input
        let images = Array4::<f64>::from_elem((1, 3, 16, 16), 0.3);
        let mut tape = Tape::new();
        let fm_ref = reference_encode(&mut tape, &reference, &cfg, &images).unwrap();
        let snapshot_back = freeze_snapshot(&store); // differs now
        let fm_live = reference_encode(&mut tape, &snapshot_back, &cfg, &images).unwrap();
        assert_ne!(tape.value(fm_ref.var), tape.value(fm_live.var));
    }
}
