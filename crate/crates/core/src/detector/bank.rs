use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng;

/// Text-classifier weights: one unit-norm row per category from a frozen
/// seeded prompt encoder, plus a fixed all-zero background row at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// (C + 1) x D; row C is the background.
    pub rows: Array2<f64>,
    pub categories: Vec<String>,
}

impl PromptBank {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn background_index(&self) -> usize {
        self.categories.len()
    }
}

/// Deterministic embedding of one (template, category) prompt.
fn prompt_embedding(template: &str, category: &str, dim: usize, seed: u64) -> Vec<f64> {
    let prompt = template.replace("{}", category);
    let mut r = rng::rng_for(seed, rng::hash_str(&prompt));
    (0..dim).map(|_| rng::randn(&mut r)).collect()
}

/// Build the classifier bank: row c is the unit-normalized mean over
/// templates of the seeded prompt embedding. If two category rows come out
/// nearly collinear (cosine >= 0.99) the seed is re-salted and the bank is
/// regenerated, so the returned bank always separates its categories.
pub fn build_prompt_bank(
    categories: &[String],
    templates: &[String],
    dim: usize,
    seed: u64,
) -> Result<PromptBank> {
    if categories.is_empty() {
        return Err(Error::Config("prompt bank needs at least one category".into()));
    }
    if templates.is_empty() {
        return Err(Error::Config("prompt bank needs at least one template".into()));
    }
    let c = categories.len();
    for attempt in 0..16u64 {
        let eff_seed = rng::mix(seed, attempt);
        let mut rows = Array2::<f64>::zeros((c + 1, dim));
        for (ci, cat) in categories.iter().enumerate() {
            let mut acc = vec![0.0; dim];
            for t in templates {
                for (k, v) in prompt_embedding(t, cat, dim, eff_seed).iter().enumerate() {
                    acc[k] += v;
                }
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (k, v) in acc.iter().enumerate() {
                rows[[ci, k]] = v / norm;
            }
        }
        // background row stays all zero
        let mut max_cos: f64 = -1.0;
        for i in 0..c {
            for j in i + 1..c {
                let cos: f64 = (0..dim).map(|k| rows[[i, k]] * rows[[j, k]]).sum();
                max_cos = max_cos.max(cos);
            }
        }
        if c == 1 || max_cos < 0.99 {
            return Ok(PromptBank {
                rows,
                categories: categories.to_vec(),
            });
        }
    }
    Err(Error::Degenerate(
        "could not build a separated prompt bank in 16 attempts".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> Vec<String> {
        ["circle", "square", "triangle", "cross"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn templates() -> Vec<String> {
        vec!["a photo of a {}".into(), "a drawing of a {}".into()]
    }

    #[test]
    fn background_row_is_all_zeros() {
        let bank = build_prompt_bank(&cats(), &templates(), 64, 0).unwrap();
        let bg = bank.rows.row(bank.background_index());
        assert!(bg.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bank_is_deterministic() {
        let a = build_prompt_bank(&cats(), &templates(), 64, 3).unwrap();
        let b = build_prompt_bank(&cats(), &templates(), 64, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn category_rows_are_unit_norm_and_separated() {
        let bank = build_prompt_bank(&cats(), &templates(), 64, 0).unwrap();
        for i in 0..4 {
            let n: f64 = bank.rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            for j in i + 1..4 {
                let cos: f64 = bank
                    .rows
                    .row(i)
                    .iter()
                    .zip(bank.rows.row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(cos < 0.99, "rows {i},{j} cosine {cos}");
            }
        }
    }

    #[test]
    fn empty_categories_rejected() {
        assert!(build_prompt_bank(&[], &templates(), 64, 0).is_err());
    }
}
