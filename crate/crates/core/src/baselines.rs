//! Ablation baselines: direct visual alignment (the consistency loss applied
//! to raw visual features, bypassing the mapper) and caption pseudo-labeling
//! (consistency in a frozen token space instead of the embedding space).

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{self, PairBatch};
use crate::rng;

/// Direct visual alignment: the identical contrastive kernel, invoked on
/// g-projected raw visual features. The only difference from the full
/// method's instance loss is what was fed in; the loss function is shared.
pub fn dva_loss(visual_pairs: &PairBatch, tau: f64) -> Result<f64> {
    losses::instance_contrastive(visual_pairs, tau, false)
}

/// Tape-resident DVA term for training.
pub fn dva_var(tape: &mut Tape, anchors: Var, counterparts: Var, tau: f64) -> Result<Var> {
    losses::contrastive_var(tape, anchors, counterparts, tau, false)
}

/// Frozen code vectors standing in for a caption vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCodebook {
    /// (M, D_l), frozen after creation.
    pub rows: Array2<f64>,
}

impl TokenCodebook {
    pub fn new(size: usize, dim: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("codebook size must be >= 1".into()));
        }
        let mut r = rng::rng_for(seed, 0xc0de);
        let rows = rng::randn_array(&[size, dim], 1.0, &mut r)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok(TokenCodebook { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Nearest code index per feature row, Euclidean distance, ties broken by
/// the lower index.
pub fn quantize_tokens(features: &Array2<f64>, codebook: &TokenCodebook) -> Result<Vec<usize>> {
    if codebook.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    if features.ncols() != codebook.rows.ncols() {
        return Err(Error::Shape(format!(
            "feature dim {} vs codebook dim {}",
            features.ncols(),
            codebook.rows.ncols()
        )));
    }
    let mut out = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (m, code) in codebook.rows.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(code.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Caption pseudo-labeling loss over descriptive features of a scene-aligned
/// pair. Pseudo-tokens come from quantizing the ORIGINAL image's features
/// (plain values, no gradient); the loss is the mean cross-entropy of the
/// STYLIZED image's code logits (negative Euclidean distance over tau)
/// against those pseudo-tokens. Gradients flow only through the stylized
/// branch.
pub fn caption_pl_from_features(
    tape: &mut Tape,
    stylized_lang: Var,
    original_lang: &Array2<f64>,
    codebook: &TokenCodebook,
    tau: f64,
) -> Result<(Var, Vec<usize>)> {
    if tau <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let sv = tape.value(stylized_lang).shape().to_vec();
    if sv[0] != original_lang.nrows() {
        return Err(Error::Shape(format!(
            "misaligned pair: {} stylized vs {} original regions",
            sv[0],
            original_lang.nrows()
        )));
    }
    let pseudo = quantize_tokens(original_lang, codebook)?;
    let loss = tape.code_ce(stylized_lang, &codebook.rows, &pseudo, tau);
    Ok((loss, pseudo))
}

/// Value-level caption loss for a feature pair (used by tests and logging).
pub fn caption_pl_value(
    original_lang: &Array2<f64>,
    stylized_lang: &Array2<f64>,
    codebook: &TokenCodebook,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(stylized_lang.clone().into_dyn());
    let (loss, _) = caption_pl_from_features(&mut tape, s, original_lang, codebook, tau)?;
    Ok(tape.scalar(loss))
}
