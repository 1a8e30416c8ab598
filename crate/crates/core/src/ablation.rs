//! Component ranking by contribution norm and mean ablation.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnpool::{
    attention_weights, bias_terms, build_tokens, decompose_tokens, forward_with_attention, pool, AttnPoolWeights,
    DecompositionLevel,
};
use crate::directions::argsort_desc;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::zeroshot::{accuracy, ClassBank};

pub const DEFAULT_PERCENTILE: f64 = 10.0;

/// Keep fractions at 10% increments.
pub fn default_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    /// Neuron-head pair contributions, keys `n * H + h`.
    Pair,
    /// Neuron contributions, keys `n`.
    Neuron,
    /// Neuron activations (channels of `Z`), keys `n`.
    NeuronActivation,
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pair => "pair",
            Self::Neuron => "neuron",
            Self::NeuronActivation => "activation",
        })
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(Self::Pair),
            "neuron" => Ok(Self::Neuron),
            "activation" | "neuron_activation" => Ok(Self::NeuronActivation),
            _ => Err(Error::ArgError(format!("unknown component kind `{s}`"))),
        }
    }
}

impl ComponentKind {
    pub fn key_count<T: Scalar>(self, w: &AttnPoolWeights<T>) -> usize {
        match self {
            Self::Pair => w.pair_count(),
            Self::Neuron | Self::NeuronActivation => w.channels(),
        }
    }
}

/// Keys ordered by descending score; ties by ascending key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRanking<T: Scalar> {
    pub kind: ComponentKind,
    pub keys: Vec<usize>,
    /// Score of `keys[i]`.
    pub scores: Vec<T>,
    pub percentile: f64,
    pub dataset: String,
}

impl<T: Scalar> PairRanking<T> {
    /// Keep-mask over all keys retaining the top `⌈fraction · |keys|⌉`.
    pub fn keep_top(&self, fraction: f64) -> Result<Vec<bool>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::ArgError(format!("fraction {fraction} not in (0, 1]")));
        }
        let count = ceil_count(fraction * self.keys.len() as f64).min(self.keys.len());
        let mut keep = vec![false; self.keys.len()];
        for &k in &self.keys[..count] {
            keep[k] = true;
        }
        Ok(keep)
    }
}

/// `⌈x⌉` tolerant to representation error (`0.1 · 30` is 3, not 4).
fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Ranks components by the mean of their largest `⌈p% · N⌉` norms.
pub fn rank_components<T: Scalar>(
    norms: &[Vec<T>],
    percentile: f64,
    kind: ComponentKind,
    dataset: &str,
) -> Result<PairRanking<T>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::ArgError(format!("percentile {percentile} not in (0, 100]")));
    }
    let scores: Vec<T> = norms
        .iter()
        .enumerate()
        .map(|(key, stream)| {
            if stream.is_empty() {
                return Err(Error::MissingSamples(key));
            }
            let mut sorted = stream.clone();
            sorted.sort_by(|a, b| crate::scalar::desc(*a, *b));
            let top = ceil_count(percentile / 100.0 * sorted.len() as f64).clamp(1, sorted.len());
            let sum = sorted[..top].iter().fold(T::zero(), |acc, &v| acc + v);
            Ok(sum / T::from_usize(top).expect("count"))
        })
        .collect::<Result<_>>()?;
    let keys = argsort_desc(&scores);
    let scores = keys.iter().map(|&k| scores[k]).collect();
    Ok(PairRanking {
        kind,
        keys,
        scores,
        percentile,
        dataset: dataset.to_string(),
    })
}

fn contribution_level(kind: ComponentKind) -> Result<DecompositionLevel> {
    match kind {
        ComponentKind::Pair => Ok(DecompositionLevel::NeuronHead),
        ComponentKind::Neuron => Ok(DecompositionLevel::Neuron),
        ComponentKind::NeuronActivation => Err(Error::KindError(
            "activation ablation replaces channels of Z; use activation_mean_ablate".into(),
        )),
    }
}

/// Embedding with every component outside `keep` replaced by its mean
/// contribution (`means`, one row per key).
///
/// When at most half the keys are ablated the result is computed as
/// `forward − Σ_ablated (r − mean)`, otherwise as
/// `Σ_kept r + Σ_ablated mean + biases`; keeping everything therefore returns
/// the forward output bit-for-bit and keeping nothing returns a vector that
/// does not depend on the image at all.
pub fn mean_ablate_embedding<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    kind: ComponentKind,
    keep: &[bool],
    means: ArrayView2<T>,
) -> Result<Array1<T>> {
    let level = contribution_level(kind)?;
    let keys = kind.key_count(w);
    if keep.len() != keys || means.nrows() != keys {
        return Err(Error::KindError(format!(
            "{kind} ablation expects {keys} keys, got keep mask of {} and {} means",
            keep.len(),
            means.nrows()
        )));
    }
    if means.ncols() != w.embed_dim() {
        return Err(Error::shape("ablation means", &[keys, w.embed_dim()], means.shape()));
    }
    let tokens = build_tokens(z, w)?;
    let attn = attention_weights(&tokens, w);
    let ablated = keep.iter().filter(|&&k| !k).count();
    if ablated == 0 {
        return Ok(forward_with_attention(&tokens, &attn, w));
    }
    let dec = decompose_tokens(&tokens, &attn, w, level);
    let rows = crate::attnpool::as_rows(&dec.values);

    if 2 * ablated <= keys {
        let mut out = forward_with_attention(&tokens, &attn, w);
        for key in (0..keys).filter(|&k| !keep[k]) {
            out += &means.row(key);
            out -= &rows.row(key);
        }
        Ok(out)
    } else {
        let mut out = Array1::zeros(w.embed_dim());
        for key in 0..keys {
            if keep[key] {
                out += &rows.row(key);
            } else {
                out += &means.row(key);
            }
        }
        let (beta, b_o) = bias_terms(w);
        for row in beta.rows() {
            out += &row;
        }
        Ok(out + &b_o)
    }
}

/// Replaces channels outside `keep` by their scalar dataset mean and reruns
/// the pooling, attention included.
pub fn activation_mean_ablate<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    keep: &[bool],
    mean_activations: ArrayView1<T>,
) -> Result<Array1<T>> {
    let c = w.channels();
    if keep.len() != c || mean_activations.len() != c {
        return Err(Error::KindError(format!(
            "activation ablation expects {c} neurons, got keep mask of {} and {} means",
            keep.len(),
            mean_activations.len()
        )));
    }
    let mut z = z.to_owned();
    for n in (0..c).filter(|&n| !keep[n]) {
        z.index_axis_mut(Axis(0), n).fill(mean_activations[n]);
    }
    pool(z.view(), w)
}

/// Per-channel activation mean over images and spatial positions.
pub fn channel_means<T: Scalar>(activations: ArrayView4<T>) -> Array1<T> {
    let (n, c, hp, wp) = activations.dim();
    let count = T::from_usize(n * hp * wp).expect("count");
    Array1::from_shape_fn(c, |ch| {
        let mut acc = T::zero();
        for v in activations.slice(s![.., ch, .., ..]).iter() {
            acc += *v;
        }
        acc / count
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub kind: ComponentKind,
    pub accuracy: f64,
}

/// Accuracy after keeping the top `⌈f · |keys|⌉` components, for each `f`.
pub fn ablation_curve<T, F>(ranking: &PairRanking<T>, fractions: &[f64], mut evaluate: F) -> Result<Vec<CurvePoint>>
where
    T: Scalar,
    F: FnMut(&[bool]) -> Result<f64>,
{
    fractions
        .iter()
        .map(|&f| {
            let keep = ranking.keep_top(f)?;
            Ok(CurvePoint {
                fraction: f,
                kind: ranking.kind,
                accuracy: evaluate(&keep)?,
            })
        })
        .collect()
}

/// Zero-shot accuracy of ablated embeddings over a labelled dataset.
pub struct AblationEvaluator<'a, T: Scalar> {
    pub weights: &'a AttnPoolWeights<T>,
    /// `N × C × Hp × Wp`
    pub activations: ArrayView4<'a, T>,
    pub labels: &'a [usize],
    pub bank: &'a ClassBank<T>,
}

impl<T: Scalar> AblationEvaluator<'_, T> {
    /// `means` holds contribution means for `Pair`/`Neuron` (`keys × d`) or
    /// channel means for `NeuronActivation` (`1 × C`).
    pub fn accuracy(&self, kind: ComponentKind, keep: &[bool], means: ArrayView2<T>) -> Result<f64> {
        let n = self.activations.shape()[0];
        let embeds: Vec<Array1<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let z = self.activations.index_axis(Axis(0), i);
                match kind {
                    ComponentKind::NeuronActivation => activation_mean_ablate(z, self.weights, keep, means.row(0)),
                    _ => mean_ablate_embedding(z, self.weights, kind, keep, means),
                }
            })
            .collect::<Result<_>>()?;
        let mut m = Array2::zeros((n, self.weights.embed_dim()));
        for (i, e) in embeds.iter().enumerate() {
            m.row_mut(i).assign(e);
        }
        accuracy(m.view(), self.labels, self.bank)
    }
}
