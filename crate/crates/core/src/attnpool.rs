//! Attention pooling and its exact additive decomposition.
//!
//! Activations `Z` (`C × Hp × Wp`) are flattened into `K = Hp·Wp` tokens, a
//! mean token is prepended and the positional embedding added to all `K + 1`
//! tokens. Only the first token is used as a query, so the pooled output is
//!
//! ```text
//! out = Σ_h Σ_i a[h][i] · (z'_i · W_VO^h) + Σ_h β^h + b_o
//! ```
//!
//! where `W_VO^h` (`C × d`) is the product of head `h`'s value columns with
//! its output rows and `β^h` is the value bias routed through the same
//! output rows. Splitting `z'_i · W_VO^h` over rows gives one `d`-vector per
//! (neuron, head, token), which is what [`decompose`] returns, optionally
//! summed over tokens, heads or neurons.
//!
//! All matrices use the row-vector convention `y = x · W + b`, i.e. `w_q`
//! is stored `[in, out]`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AttnPoolWeights<T: Scalar> {
    pub w_q: Array2<T>,
    pub b_q: Array1<T>,
    pub w_k: Array2<T>,
    pub b_k: Array1<T>,
    pub w_v: Array2<T>,
    pub b_v: Array1<T>,
    /// `C × d`
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    /// `(K + 1) × C`
    pub pos_embed: Array2<T>,
    pub heads: usize,
    /// Spatial grid `(Hp, Wp)`.
    pub grid: (usize, usize),
    ov: OnceLock<Array3<T>>,
}

impl<T: Scalar> AttnPoolWeights<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_q: Array2<T>,
        b_q: Array1<T>,
        w_k: Array2<T>,
        b_k: Array1<T>,
        w_v: Array2<T>,
        b_v: Array1<T>,
        w_o: Array2<T>,
        b_o: Array1<T>,
        pos_embed: Array2<T>,
        heads: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let c = w_q.nrows();
        let d = w_o.ncols();
        let k1 = grid.0 * grid.1 + 1;
        if heads == 0 || c == 0 || !c.is_multiple_of(heads) {
            return Err(Error::ArgError(format!("C = {c} is not divisible by H = {heads}")));
        }
        let check2 = |name: &str, m: &Array2<T>, r: usize, k: usize| {
            if m.dim() != (r, k) {
                Err(Error::shape(name, &[r, k], m.shape()))
            } else {
                Ok(())
            }
        };
        let check1 = |name: &str, v: &Array1<T>, n: usize| {
            if v.len() != n {
                Err(Error::shape(name, &[n], v.shape()))
            } else {
                Ok(())
            }
        };
        check2("attnpool.w_q", &w_q, c, c)?;
        check2("attnpool.w_k", &w_k, c, c)?;
        check2("attnpool.w_v", &w_v, c, c)?;
        check2("attnpool.w_o", &w_o, c, d)?;
        check2("attnpool.pos_embed", &pos_embed, k1, c)?;
        check1("attnpool.b_q", &b_q, c)?;
        check1("attnpool.b_k", &b_k, c)?;
        check1("attnpool.b_v", &b_v, c)?;
        check1("attnpool.b_o", &b_o, d)?;
        Ok(Self {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            pos_embed,
            heads,
            grid,
            ov: OnceLock::new(),
        })
    }

    /// Number of neurons `C`.
    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_o.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    /// Number of spatial tokens `K`.
    pub fn spatial_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `C × H`, the number of neuron-head pairs.
    pub fn pair_count(&self) -> usize {
        self.channels() * self.heads
    }

    /// Flat pair index, neuron-major.
    pub fn pair_index(&self, neuron: usize, head: usize) -> usize {
        neuron * self.heads + head
    }

    pub fn pair_of(&self, index: usize) -> (usize, usize) {
        (index / self.heads, index % self.heads)
    }

    pub fn head_range(&self, head: usize) -> Range<usize> {
        let dh = self.head_dim();
        head * dh..(head + 1) * dh
    }

    /// Per-head OV matrices, `H × C × d`; `ov[h][n]` is row `n` of `W_VO^h`.
    pub fn ov(&self) -> &Array3<T> {
        self.ov.get_or_init(|| {
            let (c, d, heads) = (self.channels(), self.embed_dim(), self.heads);
            let mut ov = Array3::zeros((heads, c, d));
            for h in 0..heads {
                let r = self.head_range(h);
                let wv = self.w_v.slice(s![.., r.clone()]);
                let wo = self.w_o.slice(s![r, ..]);
                ov.index_axis_mut(Axis(0), h).assign(&wv.dot(&wo));
            }
            ov
        })
    }
}

/// Position-embedded token sequence `z'_0 .. z'_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T: Scalar> {
    /// `(K + 1) × C`
    pub tokens: Array2<T>,
    /// Mean of the raw image tokens, before the positional embedding.
    pub raw_mean_token: Array1<T>,
    pub grid: (usize, usize),
}

/// Class-token attention, `H × (K + 1)`; every row is a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeightMap<T: Scalar> {
    pub weights: Array2<T>,
}

fn check_activation<T: Scalar>(z: &ArrayView3<T>, w: &AttnPoolWeights<T>) -> Result<()> {
    let expected = [w.channels(), w.grid.0, w.grid.1];
    if z.shape() != expected {
        return Err(Error::shape("activation map", &expected, z.shape()));
    }
    Ok(())
}

/// Flattens `Z` row-major over space, prepends the mean token, adds `pos_embed`.
pub fn build_tokens<T: Scalar>(z: ArrayView3<T>, w: &AttnPoolWeights<T>) -> Result<TokenSequence<T>> {
    check_activation(&z, w)?;
    let (c, hp, wp) = z.dim();
    let k = hp * wp;
    let mut tokens = Array2::zeros((k + 1, c));
    for y in 0..hp {
        for x in 0..wp {
            let i = 1 + y * wp + x;
            for n in 0..c {
                tokens[[i, n]] = z[[n, y, x]];
            }
        }
    }
    let inv_k = T::one() / T::from_usize(k).expect("token count");
    let mut mean = Array1::zeros(c);
    for n in 0..c {
        let mut acc = T::zero();
        for i in 1..=k {
            acc += tokens[[i, n]];
        }
        mean[n] = acc * inv_k;
    }
    tokens.row_mut(0).assign(&mean);
    tokens += &w.pos_embed;
    Ok(TokenSequence {
        tokens,
        raw_mean_token: mean,
        grid: (hp, wp),
    })
}

fn softmax_in_place<T: Scalar>(logits: &mut [T]) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

/// Class-token query projected through `w_q`.
pub(crate) fn class_query<T: Scalar>(tokens: &TokenSequence<T>, w: &AttnPoolWeights<T>) -> Array1<T> {
    tokens.tokens.row(0).dot(&w.w_q) + &w.b_q
}

/// Keys for all tokens, `(K + 1) × C`.
pub(crate) fn keys<T: Scalar>(tokens: &TokenSequence<T>, w: &AttnPoolWeights<T>) -> Array2<T> {
    tokens.tokens.dot(&w.w_k) + &w.b_k
}

/// Softmax attention of a query against keys, per head.
pub(crate) fn attention_from_qk<T: Scalar>(
    query: &Array1<T>,
    keys: &Array2<T>,
    w: &AttnPoolWeights<T>,
) -> AttnWeightMap<T> {
    let k1 = keys.nrows();
    let scale = T::one() / T::from_usize(w.head_dim()).expect("head dim").sqrt();
    let mut weights = Array2::zeros((w.heads, k1));
    let mut logits = vec![T::zero(); k1];
    for h in 0..w.heads {
        let r = w.head_range(h);
        for (i, logit) in logits.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in r.clone() {
                acc += query[j] * keys[[i, j]];
            }
            *logit = acc * scale;
        }
        softmax_in_place(&mut logits);
        weights.row_mut(h).assign(&Array1::from(logits.clone()));
    }
    AttnWeightMap { weights }
}

pub fn attention_weights<T: Scalar>(tokens: &TokenSequence<T>, w: &AttnPoolWeights<T>) -> AttnWeightMap<T> {
    attention_from_qk(&class_query(tokens, w), &keys(tokens, w), w)
}

/// Dense attention-pooling output for the class-token query.
pub fn forward<T: Scalar>(tokens: &TokenSequence<T>, w: &AttnPoolWeights<T>) -> Array1<T> {
    let attn = attention_weights(tokens, w);
    forward_with_attention(tokens, &attn, w)
}

pub fn forward_with_attention<T: Scalar>(
    tokens: &TokenSequence<T>,
    attn: &AttnWeightMap<T>,
    w: &AttnPoolWeights<T>,
) -> Array1<T> {
    let values = tokens.tokens.dot(&w.w_v) + &w.b_v;
    let c = w.channels();
    let mut pooled = Array1::zeros(c);
    for h in 0..w.heads {
        for j in w.head_range(h) {
            let mut acc = T::zero();
            for i in 0..values.nrows() {
                acc += attn.weights[[h, i]] * values[[i, j]];
            }
            pooled[j] = acc;
        }
    }
    pooled.dot(&w.w_o) + &w.b_o
}

/// Convenience: tokens from `Z` followed by [`forward`].
pub fn pool<T: Scalar>(z: ArrayView3<T>, w: &AttnPoolWeights<T>) -> Result<Array1<T>> {
    Ok(forward(&build_tokens(z, w)?, w))
}

/// Per-head value-bias contributions `β^h` (`H × d`) and the output bias.
pub fn bias_terms<T: Scalar>(w: &AttnPoolWeights<T>) -> (Array2<T>, Array1<T>) {
    let mut beta = Array2::zeros((w.heads, w.embed_dim()));
    for h in 0..w.heads {
        let r = w.head_range(h);
        let bv = w.b_v.slice(s![r.clone()]);
        let wo = w.w_o.slice(s![r, ..]);
        beta.row_mut(h).assign(&bv.dot(&wo));
    }
    (beta, w.b_o.clone())
}

/// Granularity of a decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionLevel {
    /// `r^{n,h}_i`, shape `C × H × (K+1) × d`
    NeuronHeadToken,
    /// `r^{n,h}`, shape `C × H × d`
    NeuronHead,
    /// `r^n`, shape `C × d`
    Neuron,
    /// `r^h_i`, shape `H × (K+1) × d`
    HeadToken,
    /// `r^h`, shape `H × d`
    Head,
}

impl DecompositionLevel {
    pub const ALL: [DecompositionLevel; 5] = [
        Self::NeuronHeadToken,
        Self::NeuronHead,
        Self::Neuron,
        Self::HeadToken,
        Self::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NeuronHeadToken => "neuron_head_token",
            Self::NeuronHead => "neuron_head",
            Self::Neuron => "neuron",
            Self::HeadToken => "head_token",
            Self::Head => "head",
        }
    }

    fn has_neuron(self) -> bool {
        matches!(self, Self::NeuronHeadToken | Self::NeuronHead | Self::Neuron)
    }

    fn has_head(self) -> bool {
        !matches!(self, Self::Neuron)
    }

    fn has_token(self) -> bool {
        matches!(self, Self::NeuronHeadToken | Self::HeadToken)
    }

    /// Whether `coarser` is obtained from `self` by summing axes.
    pub fn refines(self, coarser: Self) -> bool {
        (self.has_neuron() || !coarser.has_neuron())
            && (self.has_head() || !coarser.has_head())
            && (self.has_token() || !coarser.has_token())
    }

    /// Shape of the value array for a model with the given geometry.
    pub fn shape(self, c: usize, heads: usize, k1: usize, d: usize) -> Vec<usize> {
        match self {
            Self::NeuronHeadToken => vec![c, heads, k1, d],
            Self::NeuronHead => vec![c, heads, d],
            Self::Neuron => vec![c, d],
            Self::HeadToken => vec![heads, k1, d],
            Self::Head => vec![heads, d],
        }
    }
}

impl fmt::Display for DecompositionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecompositionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::ArgError(format!("unknown decomposition level `{s}`")))
    }
}

/// Contributions at one level plus the bias terms they exclude.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionTensor<T: Scalar> {
    pub level: DecompositionLevel,
    /// Last axis is the embedding dimension `d`; see [`DecompositionLevel`].
    pub values: ArrayD<T>,
    /// `β^h`, `H × d`.
    pub head_bias: Array2<T>,
    pub out_bias: Array1<T>,
}

impl<T: Scalar> DecompositionTensor<T> {
    /// Sums axes to reach a coarser level.
    pub fn collapse(&self, to: DecompositionLevel) -> Result<Self> {
        use DecompositionLevel::*;
        if !self.level.refines(to) {
            return Err(Error::LevelError(format!("{} -> {}", self.level, to)));
        }
        // Axes to sum, highest first so indices stay valid.
        let axes: Vec<usize> = match (self.level, to) {
            (a, b) if a == b => vec![],
            (NeuronHeadToken, NeuronHead) => vec![2],
            (NeuronHeadToken, Neuron) => vec![2, 1],
            (NeuronHeadToken, HeadToken) => vec![0],
            (NeuronHeadToken, Head) => vec![2, 0],
            (NeuronHead, Neuron) => vec![1],
            (NeuronHead, Head) => vec![0],
            (HeadToken, Head) => vec![1],
            (a, b) => return Err(Error::LevelError(format!("{a} -> {b}"))),
        };
        let mut values = self.values.clone();
        for ax in axes {
            values = values.sum_axis(Axis(ax));
        }
        Ok(Self {
            level: to,
            values,
            head_bias: self.head_bias.clone(),
            out_bias: self.out_bias.clone(),
        })
    }

    /// Sum of all contributions, excluding biases.
    pub fn total(&self) -> Array1<T> {
        let d = self.out_bias.len();
        let flat = self
            .values
            .view()
            .into_shape_with_order((self.values.len() / d, d))
            .expect("contiguous values");
        let mut acc = Array1::zeros(d);
        for row in flat.rows() {
            acc += &row;
        }
        acc
    }

    /// Contributions plus `Σ_h β^h + b_o`; equals the forward output.
    pub fn reconstruct(&self) -> Array1<T> {
        let mut out = self.total();
        for row in self.head_bias.rows() {
            out += &row;
        }
        out + &self.out_bias
    }
}

/// `s[h][n] = Σ_i a[h][i] · z'_i[n]`, the scalar coefficient of the
/// neuron-head pair `(n, h)`: `r^{n,h} = s[h][n] · W_VO^{n,h}`.
pub fn pair_coefficients<T: Scalar>(tokens: &TokenSequence<T>, attn: &AttnWeightMap<T>) -> Array2<T> {
    let (k1, c) = tokens.tokens.dim();
    let heads = attn.weights.nrows();
    let mut coeff = Array2::zeros((heads, c));
    for h in 0..heads {
        for n in 0..c {
            let mut acc = T::zero();
            for i in 0..k1 {
                acc += attn.weights[[h, i]] * tokens.tokens[[i, n]];
            }
            coeff[[h, n]] = acc;
        }
    }
    coeff
}

/// Decomposes precomputed tokens and attention at the requested level.
pub fn decompose_tokens<T: Scalar>(
    tokens: &TokenSequence<T>,
    attn: &AttnWeightMap<T>,
    w: &AttnPoolWeights<T>,
    level: DecompositionLevel,
) -> DecompositionTensor<T> {
    use DecompositionLevel::*;
    let (c, heads, d) = (w.channels(), w.heads, w.embed_dim());
    let k1 = tokens.tokens.nrows();
    let ov = w.ov();
    let a = &attn.weights;
    let z = &tokens.tokens;

    let values: ArrayD<T> = match level {
        NeuronHeadToken => {
            let mut v = Array4::zeros((c, heads, k1, d));
            for n in 0..c {
                for h in 0..heads {
                    for i in 0..k1 {
                        let coef = a[[h, i]] * z[[i, n]];
                        let row = ov.slice(s![h, n, ..]);
                        v.slice_mut(s![n, h, i, ..]).assign(&row.mapv(|x| coef * x));
                    }
                }
            }
            v.into_dyn()
        }
        NeuronHead => {
            let coeff = pair_coefficients(tokens, attn);
            let mut v = Array3::zeros((c, heads, d));
            for n in 0..c {
                for h in 0..heads {
                    let coef = coeff[[h, n]];
                    v.slice_mut(s![n, h, ..])
                        .assign(&ov.slice(s![h, n, ..]).mapv(|x| coef * x));
                }
            }
            v.into_dyn()
        }
        Neuron => {
            let coeff = pair_coefficients(tokens, attn);
            let mut v = Array2::zeros((c, d));
            for n in 0..c {
                let mut row = v.row_mut(n);
                for h in 0..heads {
                    row.scaled_add(coeff[[h, n]], &ov.slice(s![h, n, ..]));
                }
            }
            v.into_dyn()
        }
        HeadToken => {
            let mut v = Array3::zeros((heads, k1, d));
            for h in 0..heads {
                for i in 0..k1 {
                    let mut acc = Array1::zeros(d);
                    for n in 0..c {
                        acc.scaled_add(z[[i, n]], &ov.slice(s![h, n, ..]));
                    }
                    acc.mapv_inplace(|x| a[[h, i]] * x);
                    v.slice_mut(s![h, i, ..]).assign(&acc);
                }
            }
            v.into_dyn()
        }
        Head => {
            let coeff = pair_coefficients(tokens, attn);
            let mut v = Array2::zeros((heads, d));
            for h in 0..heads {
                let mut row = v.row_mut(h);
                for n in 0..c {
                    row.scaled_add(coeff[[h, n]], &ov.slice(s![h, n, ..]));
                }
            }
            v.into_dyn()
        }
    };

    let (head_bias, out_bias) = bias_terms(w);
    DecompositionTensor {
        level,
        values,
        head_bias,
        out_bias,
    }
}

pub fn decompose<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    level: DecompositionLevel,
) -> Result<DecompositionTensor<T>> {
    let tokens = build_tokens(z, w)?;
    let attn = attention_weights(&tokens, w);
    Ok(decompose_tokens(&tokens, &attn, w, level))
}

/// Streams the `neuron_head_token` level in token-major chunks of at most
/// `chunk_tokens` tokens. Each callback receives the token range and a
/// `C × H × t × d` view; peak memory is one chunk.
pub fn decompose_streaming<T, F>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    chunk_tokens: usize,
    mut sink: F,
) -> Result<()>
where
    T: Scalar,
    F: FnMut(Range<usize>, ArrayView4<T>) -> Result<()>,
{
    if chunk_tokens == 0 {
        return Err(Error::ArgError("chunk size must be positive".into()));
    }
    let tokens = build_tokens(z, w)?;
    let attn = attention_weights(&tokens, w);
    let (c, heads, d) = (w.channels(), w.heads, w.embed_dim());
    let k1 = tokens.tokens.nrows();
    let ov = w.ov();
    let mut start = 0;
    while start < k1 {
        let end = (start + chunk_tokens).min(k1);
        let mut chunk = Array4::zeros((c, heads, end - start, d));
        for n in 0..c {
            for h in 0..heads {
                for i in start..end {
                    let coef = attn.weights[[h, i]] * tokens.tokens[[i, n]];
                    chunk
                        .slice_mut(s![n, h, i - start, ..])
                        .assign(&ov.slice(s![h, n, ..]).mapv(|x| coef * x));
                }
            }
        }
        sink(start..end, chunk.view())?;
        start = end;
    }
    Ok(())
}

/// Flattened `values` with the trailing `d` axis kept: `(count, d)`.
pub fn as_rows<T: Scalar>(values: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    let d = *values.shape().last().expect("non-empty shape");
    values
        .view()
        .into_shape_with_order((values.len() / d, d))
        .expect("contiguous")
}

/// Rebuilds a dynamic array from a level shape; used when reading `decomp.*` tensors back.
pub fn level_array<T: Scalar>(shape: &[usize], data: Vec<T>) -> Result<ArrayD<T>> {
    ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| Error::ArgError(e.to_string()))
}
