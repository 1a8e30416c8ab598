//! Retrieval, polysemanticity, distribution-shift monitoring and attention
//! sink / register neuron analysis.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnpool::{
    attention_from_qk, attention_weights, build_tokens, class_query, forward_with_attention, keys, pair_coefficients,
    AttnPoolWeights, AttnWeightMap,
};
use crate::directions::{ContributionSamples, Direction};
use crate::error::{Error, Result};
use crate::scalar::{desc, dot, norm, Scalar};
use crate::sparse_text::TextDictionary;

pub const DEFAULT_TOP_N: usize = 10;
pub const DEFAULT_CONCEPT_K: usize = 5;
/// Cosine threshold for sub-concept candidates. An artifact default, not a
/// tuned value.
pub const DEFAULT_TAU: f64 = 0.2;

/// Numbers compare numerically, everything else lexicographically.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Image ids with the largest contribution norms; ties by ascending id.
pub fn top_images_by_norm<T: Scalar>(samples: &ContributionSamples<T>, top_n: usize) -> Result<Vec<String>> {
    if top_n > samples.len() {
        return Err(Error::ArgError(format!("top {top_n} of {} images", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        desc(samples.norms[a], samples.norms[b]).then_with(|| compare_ids(&samples.image_ids[a], &samples.image_ids[b]))
    });
    Ok(order
        .into_iter()
        .take(top_n)
        .map(|i| samples.image_ids[i].clone())
        .collect())
}

/// `Σ ‖x_i − centroid‖²`, on unit-normalized rows when `normalize` is set.
pub fn inertia<T: Scalar>(embeds: ArrayView2<T>, normalize: bool) -> Result<T> {
    let (m, d) = embeds.dim();
    if m == 0 {
        return Err(Error::ArgError("inertia of an empty set".into()));
    }
    let mut rows: Vec<Vec<T>> = embeds.rows().into_iter().map(|r| r.to_vec()).collect();
    if normalize {
        for r in rows.iter_mut() {
            let n = norm(r);
            if n == T::zero() {
                return Err(Error::ZeroVector);
            }
            r.iter_mut().for_each(|x| *x /= n);
        }
    }
    // Measured from the first row: exact zero for duplicates.
    let origin = rows[0].clone();
    for r in rows.iter_mut() {
        r.iter_mut().zip(&origin).for_each(|(x, &o)| *x -= o);
    }
    let inv_m = T::one() / T::from_usize(m).expect("count");
    let centroid: Vec<T> = (0..d)
        .map(|j| rows.iter().fold(T::zero(), |acc, r| acc + r[j]) * inv_m)
        .collect();
    Ok(rows.iter().fold(T::zero(), |acc, r| {
        acc + r
            .iter()
            .zip(&centroid)
            .fold(T::zero(), |s, (&x, &c)| s + (x - c) * (x - c))
    }))
}

/// `‖Σ_{(n,h)∈pairs} r^{n,h}‖ / ‖M_image‖`.
pub fn concept_contribution_ratio<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    pairs: &[(usize, usize)],
) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::ArgError("contribution ratio needs at least one pair".into()));
    }
    let tokens = build_tokens(z, w)?;
    let attn = attention_weights(&tokens, w);
    let output = forward_with_attention(&tokens, &attn, w);
    let out_norm = norm(output.as_slice().expect("contiguous"));
    if out_norm == T::zero() {
        return Err(Error::Undefined("model output has zero norm".into()));
    }
    let coeff = pair_coefficients(&tokens, &attn);
    let ov = w.ov();
    let mut acc = Array1::zeros(w.embed_dim());
    for &(n, h) in pairs {
        if n >= w.channels() || h >= w.heads {
            return Err(Error::ArgError(format!("pair ({n}, {h}) out of range")));
        }
        acc.scaled_add(coeff[[h, n]], &ov.slice(ndarray::s![h, n, ..]));
    }
    Ok(norm(acc.as_slice().expect("contiguous")) / out_norm)
}

/// [`concept_contribution_ratio`] for every image of an `N × C × Hp × Wp` set.
pub fn concept_ratios<T: Scalar>(
    activations: ArrayView4<T>,
    w: &AttnPoolWeights<T>,
    pairs: &[(usize, usize)],
) -> Result<Vec<T>> {
    (0..activations.shape()[0])
        .into_par_iter()
        .map(|i| concept_contribution_ratio(activations.index_axis(Axis(0), i), w, pairs))
        .collect()
}

/// Pearson correlation between 0/1 flags and values, via
/// `(M₁ − M₀) / s · √(p q)` with the population standard deviation.
pub fn point_biserial<T: Scalar>(flags: &[bool], values: &[T]) -> Result<T> {
    if flags.len() != values.len() {
        return Err(Error::ArgError(format!(
            "{} flags for {} values",
            flags.len(),
            values.len()
        )));
    }
    let n = values.len();
    let n1 = flags.iter().filter(|&&f| f).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Undefined("point-biserial needs both groups non-empty".into()));
    }
    let (mut s1, mut s0) = (T::zero(), T::zero());
    for (&f, &v) in flags.iter().zip(values) {
        if f {
            s1 += v;
        } else {
            s0 += v;
        }
    }
    let tn = T::from_usize(n).expect("count");
    let (tn1, tn0) = (T::from_usize(n1).expect("count"), T::from_usize(n0).expect("count"));
    let (m1, m0) = (s1 / tn1, s0 / tn0);
    let mean = (s1 + s0) / tn;
    let var = values.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / tn;
    if var <= T::zero() {
        return Err(Error::Undefined("point-biserial of constant values".into()));
    }
    let r = (m1 - m0) / var.sqrt() * (tn1 / tn * (tn0 / tn)).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStat<T: Scalar> {
    pub group: String,
    pub n: usize,
    pub gt_proportion: T,
    pub mean_ratio: T,
    /// Within-group correlation; present for groups with both labels.
    pub point_biserial: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptSeries<T: Scalar> {
    pub concept: String,
    pub groups: Vec<GroupStat<T>>,
    /// Mean of the within-group correlations over applicable groups.
    pub correlation: Option<T>,
    pub applicable_groups: usize,
    pub warnings: Vec<String>,
}

/// Per-group label proportion and mean ratio, plus the averaged
/// within-group point-biserial correlation.
///
/// `groups` maps a group key to image indices into `labels` / `ratios`.
pub fn distribution_shift_series<T: Scalar>(
    concept: &str,
    groups: &BTreeMap<String, Vec<usize>>,
    labels: &[bool],
    ratios: &[T],
) -> Result<ConceptSeries<T>> {
    if labels.len() != ratios.len() {
        return Err(Error::ArgError(format!(
            "{} labels for {} ratios",
            labels.len(),
            ratios.len()
        )));
    }
    let mut keys: Vec<&String> = groups.keys().collect();
    keys.sort_by(|a, b| compare_ids(a, b));
    let mut stats = Vec::new();
    let mut warnings = Vec::new();
    for key in keys {
        let idx = &groups[key];
        if idx.is_empty() {
            warnings.push(format!("group {key} is empty; skipped"));
            continue;
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= labels.len()) {
            return Err(Error::ArgError(format!(
                "group {key} references image {bad} of {}",
                labels.len()
            )));
        }
        let flags: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let values: Vec<T> = idx.iter().map(|&i| ratios[i]).collect();
        let tn = T::from_usize(idx.len()).expect("count");
        let positives = T::from_usize(flags.iter().filter(|&&f| f).count()).expect("count");
        let mean_ratio = values.iter().fold(T::zero(), |a, &v| a + v) / tn;
        let pb = match point_biserial(&flags, &values) {
            Ok(r) => Some(r),
            Err(Error::Undefined(msg)) => {
                if flags.iter().any(|&f| f) && flags.iter().any(|&f| !f) {
                    warnings.push(format!("group {key}: {msg}"));
                }
                None
            }
            Err(e) => return Err(e),
        };
        stats.push(GroupStat {
            group: key.clone(),
            n: idx.len(),
            gt_proportion: positives / tn,
            mean_ratio,
            point_biserial: pb,
        });
    }
    if stats.is_empty() {
        return Err(Error::ArgError("no non-empty groups".into()));
    }
    let applicable: Vec<T> = stats.iter().filter_map(|s| s.point_biserial).collect();
    let correlation = if applicable.is_empty() {
        warnings.push(format!(
            "concept {concept}: no group has both positive and negative images"
        ));
        None
    } else {
        Some(applicable.iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(applicable.len()).expect("count"))
    };
    Ok(ConceptSeries {
        concept: concept.to_string(),
        groups: stats,
        correlation,
        applicable_groups: applicable.len(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkProfile<T: Scalar> {
    /// Class-token attention averaged over heads, `K + 1` entries summing to 1.
    pub profile: Array1<T>,
    /// Argmax over spatial tokens (`i ≥ 1`); ties go to the lowest index.
    pub sink: usize,
}

fn head_mean<T: Scalar>(attn: &AttnWeightMap<T>) -> Array1<T> {
    let heads = T::from_usize(attn.weights.nrows()).expect("heads");
    attn.weights.sum_axis(Axis(0)) / heads
}

fn sink_of<T: Scalar>(profile: &Array1<T>) -> usize {
    let mut best = 1;
    for i in 2..profile.len() {
        if profile[i] > profile[best] {
            best = i;
        }
    }
    best
}

pub fn attention_sink_profile<T: Scalar>(z: ArrayView3<T>, w: &AttnPoolWeights<T>) -> Result<SinkProfile<T>> {
    let tokens = build_tokens(z, w)?;
    let profile = head_mean(&attention_weights(&tokens, w));
    let sink = sink_of(&profile);
    Ok(SinkProfile { profile, sink })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkLocation {
    /// Token `K`.
    #[default]
    LastToken,
    /// Per-image argmax of the original profile.
    Argmax,
}

impl std::str::FromStr for SinkLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_token" | "last" => Ok(Self::LastToken),
            "argmax" => Ok(Self::Argmax),
            _ => Err(Error::ArgError(format!("unknown sink location `{s}`"))),
        }
    }
}

/// `|Δ sink weight|` for every neuron on one image.
///
/// Zeroing channel `n` shifts token `i` by `−Z_i[n]` along that channel
/// (`Z_0` being the mean token), so queries and keys change by a rank-1
/// update through the `n`-th rows of `w_q` and `w_k`.
fn sink_deltas<T: Scalar>(z: ArrayView3<T>, w: &AttnPoolWeights<T>, location: SinkLocation) -> Result<Vec<T>> {
    let tokens = build_tokens(z, w)?;
    let q = class_query(&tokens, w);
    let k = keys(&tokens, w);
    let base = head_mean(&attention_from_qk(&q, &k, w));
    let sink = match location {
        SinkLocation::LastToken => base.len() - 1,
        SinkLocation::Argmax => sink_of(&base),
    };
    let (hp, wp) = w.grid;
    let mut raw = Array2::zeros((hp * wp + 1, w.channels()));
    raw.row_mut(0).assign(&tokens.raw_mean_token);
    for y in 0..hp {
        for x in 0..wp {
            raw.row_mut(1 + y * wp + x).assign(&z.slice(ndarray::s![.., y, x]));
        }
    }
    Ok((0..w.channels())
        .map(|n| {
            let col = raw.column(n);
            if col.iter().all(|&v| v == T::zero()) {
                return T::zero();
            }
            let mut q2 = q.clone();
            q2.scaled_add(-col[0], &w.w_q.row(n));
            let mut k2 = k.clone();
            for (i, mut row) in k2.rows_mut().into_iter().enumerate() {
                row.scaled_add(-col[i], &w.w_k.row(n));
            }
            let after = head_mean(&attention_from_qk(&q2, &k2, w));
            (base[sink] - after[sink]).abs()
        })
        .collect())
}

/// Neurons ordered by mean `|Δ sink weight|` when their channel is zeroed;
/// ties go to the lower neuron index.
pub fn rank_register_neurons<T: Scalar>(
    activations: ArrayView4<T>,
    w: &AttnPoolWeights<T>,
    location: SinkLocation,
) -> Result<Vec<(usize, T)>> {
    let n_img = activations.shape()[0];
    if n_img == 0 {
        return Err(Error::ArgError("register ranking needs at least one image".into()));
    }
    let per_image: Vec<Vec<T>> = (0..n_img)
        .into_par_iter()
        .map(|i| sink_deltas(activations.index_axis(Axis(0), i), w, location))
        .collect::<Result<_>>()?;
    let inv = T::one() / T::from_usize(n_img).expect("count");
    let mut scores: Vec<(usize, T)> = (0..w.channels())
        .map(|n| {
            // Sorted summation keeps the mean independent of image order.
            let mut col: Vec<T> = per_image.iter().map(|d| d[n]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            (n, col.iter().fold(T::zero(), |a, &v| a + v) * inv)
        })
        .collect();
    scores.sort_by(|a, b| desc(a.1, b.1).then(a.0.cmp(&b.0)));
    Ok(scores)
}

/// Zeroes the listed channels.
pub fn register_intervention<T: Scalar>(z: ArrayView3<T>, neurons: &[usize]) -> Result<Array3<T>> {
    let c = z.shape()[0];
    let mut out = z.to_owned();
    for &n in neurons {
        if n >= c {
            return Err(Error::ArgError(format!("neuron {n} out of range for {c} channels")));
        }
        out.index_axis_mut(Axis(0), n).fill(T::zero());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubconceptCandidate<T: Scalar> {
    pub neuron: usize,
    pub word: String,
    pub similarity: T,
}

/// Neurons whose first direction has cosine similarity above `tau` with some
/// dictionary word, with their best word; ordered by neuron.
pub fn subconcept_candidates<T: Scalar>(
    neuron_dirs: &[Direction<T>],
    dict: &TextDictionary<T>,
    tau: T,
) -> Result<Vec<SubconceptCandidate<T>>> {
    let norms: Vec<T> = dict
        .atoms
        .rows()
        .into_iter()
        .map(|r| norm(r.as_slice().expect("row")))
        .collect();
    let mut out = Vec::new();
    for (n, dir) in neuron_dirs.iter().enumerate() {
        if dir.r_hat.len() != dict.dim() {
            return Err(Error::shape("neuron direction", &[dict.dim()], dir.r_hat.shape()));
        }
        let r = dir.r_hat.as_slice().expect("contiguous");
        let rn = norm(r);
        if rn == T::zero() || dir.degenerate {
            continue;
        }
        let mut best: Option<(usize, T)> = None;
        for (j, row) in dict.atoms.rows().into_iter().enumerate() {
            if norms[j] == T::zero() {
                continue;
            }
            let cos = dot(r, row.as_slice().expect("row")) / (rn * norms[j]);
            if best.is_none_or(|(_, b)| cos > b) {
                best = Some((j, cos));
            }
        }
        if let Some((j, cos)) = best.filter(|&(_, c)| c > tau) {
            out.push(SubconceptCandidate {
                neuron: n,
                word: dict.vocab[j].clone(),
                similarity: cos,
            });
        }
    }
    Ok(out)
}
