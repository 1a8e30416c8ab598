//! Zero-shot classification against a bank of class text embeddings.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::attnpool::AttnPoolWeights;
use crate::directions::{reconstruct_embedding_with, DirectionSet, ReconstructionMode};
use crate::error::{Error, Result};
use crate::scalar::{norm, Scalar};

pub const DEFAULT_TEMPLATE: &str = "A photo of a {class}";

#[derive(Debug, Clone)]
pub struct ClassBank<T: Scalar> {
    /// `J × d`
    pub embeds: Array2<T>,
    pub names: Vec<String>,
    pub template: String,
    norms: Vec<T>,
}

impl<T: Scalar> ClassBank<T> {
    pub fn new(embeds: Array2<T>, names: Vec<String>, template: impl Into<String>) -> Result<Self> {
        if embeds.nrows() == 0 {
            return Err(Error::ArgError("class bank is empty".into()));
        }
        if names.len() != embeds.nrows() {
            return Err(Error::ArgError(format!(
                "{} class names for {} embeddings",
                names.len(),
                embeds.nrows()
            )));
        }
        if embeds.iter().any(|x| !x.is_finite()) {
            return Err(Error::ArgError("class embeddings must be finite".into()));
        }
        let embeds = embeds.as_standard_layout().into_owned();
        let norms: Vec<T> = embeds
            .rows()
            .into_iter()
            .map(|r| norm(r.as_slice().expect("row")))
            .collect();
        if norms.iter().any(|&n| n == T::zero()) {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            embeds,
            names,
            template: template.into(),
            norms,
        })
    }

    /// Averages several template embeddings per class (`templates × J × d`
    /// given as one matrix per template), renormalizing each row.
    pub fn from_templates(per_template: &[Array2<T>], names: Vec<String>, template: impl Into<String>) -> Result<Self> {
        let first = per_template
            .first()
            .ok_or_else(|| Error::ArgError("no template embeddings".into()))?;
        let mut acc = Array2::zeros(first.raw_dim());
        for m in per_template {
            if m.dim() != first.dim() {
                return Err(Error::shape("template embeddings", first.shape(), m.shape()));
            }
            for (mut dst, src) in acc.rows_mut().into_iter().zip(m.rows()) {
                let n = norm(&src.to_vec());
                if n == T::zero() {
                    return Err(Error::ZeroVector);
                }
                dst.scaled_add(T::one() / n, &src);
            }
        }
        for mut row in acc.rows_mut() {
            let n = norm(&row.to_vec());
            if n == T::zero() {
                return Err(Error::ZeroVector);
            }
            row.mapv_inplace(|x| x / n);
        }
        Self::new(acc, names, template)
    }

    pub fn len(&self) -> usize {
        self.embeds.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cosine similarity of one image embedding to every class.
pub fn similarity<T: Scalar>(image: ArrayView1<T>, bank: &ClassBank<T>) -> Result<Array1<T>> {
    if image.len() != bank.embeds.ncols() {
        return Err(Error::shape("image embedding", &[bank.embeds.ncols()], image.shape()));
    }
    let image = image.to_vec();
    let e_norm = norm(&image);
    if e_norm == T::zero() {
        return Err(Error::ZeroVector);
    }
    Ok(bank
        .embeds
        .rows()
        .into_iter()
        .zip(&bank.norms)
        .map(|(row, &b_norm)| crate::scalar::dot(&image, row.as_slice().expect("row")) / (e_norm * b_norm))
        .collect())
}

/// Argmax of [`similarity`]; ties go to the lowest class index.
pub fn classify<T: Scalar>(image: ArrayView1<T>, bank: &ClassBank<T>) -> Result<usize> {
    let scores = similarity(image, bank)?;
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Top-1 accuracy of `N × d` embeddings against integer labels.
pub fn accuracy<T: Scalar>(embeds: ArrayView2<T>, labels: &[usize], bank: &ClassBank<T>) -> Result<f64> {
    if embeds.nrows() != labels.len() {
        return Err(Error::ArgError(format!(
            "{} embeddings for {} labels",
            embeds.nrows(),
            labels.len()
        )));
    }
    if embeds.nrows() == 0 {
        return Err(Error::ArgError("accuracy of an empty set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= bank.len()) {
        return Err(Error::ArgError(format!(
            "label {bad} out of range for {} classes",
            bank.len()
        )));
    }
    let correct: Vec<bool> = (0..labels.len())
        .into_par_iter()
        .map(|i| classify(embeds.row(i), bank).map(|p| p == labels[i]))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / labels.len() as f64)
}

/// Embeddings of every image in `N × C × Hp × Wp` under a reconstruction
/// mode; see [`reconstruct_embedding_with`] for `replacements`.
pub fn reconstructed_embeddings<T: Scalar>(
    activations: ArrayView4<T>,
    w: &AttnPoolWeights<T>,
    mode: ReconstructionMode,
    dirs: &DirectionSet<T>,
    replacements: Option<&[Array1<T>]>,
) -> Result<Array2<T>> {
    let n = activations.shape()[0];
    let rows: Vec<Array1<T>> = (0..n)
        .into_par_iter()
        .map(|i| reconstruct_embedding_with(activations.index_axis(Axis(0), i), w, mode, dirs, replacements))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((n, w.embed_dim()));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// `{mode, n, accuracy}` report emitted by the classify command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub mode: String,
    pub n: usize,
    pub accuracy: f64,
}
