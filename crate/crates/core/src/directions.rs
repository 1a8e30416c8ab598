//! Principal directions of component contributions and embedding
//! reconstruction from them.
//!
//! Every component (a neuron-head pair, a neuron or a head) produces one
//! `d`-vector per image. A direction is fit on the `top_m` samples with the
//! largest norm, centered on the mean over *all* samples, and a contribution
//! is approximated as `⟨r − b, r̂⟩·r̂ + b`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnpool::{
    attention_weights, build_tokens, decompose_tokens, forward_with_attention, pair_coefficients, AttnPoolWeights,
    DecompositionLevel,
};
use crate::bundle::{names, write_bundle, Tensor, TensorBundle, TensorMap};
use crate::error::{Error, Result};
use crate::linalg::right_singular_vectors;
use crate::scalar::{dot, norm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKey {
    Pair { neuron: usize, head: usize },
    Neuron(usize),
    Head(usize),
}

impl fmt::Display for ComponentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentKey::Pair { neuron, head } => write!(f, "({neuron},{head})"),
            ComponentKey::Neuron(n) => write!(f, "n{n}"),
            ComponentKey::Head(h) => write!(f, "h{h}"),
        }
    }
}

/// Contributions of one component over a dataset, `N × d`.
#[derive(Debug, Clone)]
pub struct ContributionSamples<T: Scalar> {
    pub key: ComponentKey,
    pub samples: Array2<T>,
    pub norms: Vec<T>,
    pub image_ids: Vec<String>,
}

impl<T: Scalar> ContributionSamples<T> {
    pub fn new(key: ComponentKey, samples: Array2<T>, image_ids: Vec<String>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::ArgError("contribution samples need at least one row".into()));
        }
        if image_ids.len() != samples.nrows() {
            return Err(Error::ArgError(format!(
                "{} image ids for {} samples",
                image_ids.len(),
                samples.nrows()
            )));
        }
        let norms = samples
            .rows()
            .into_iter()
            .map(|r| norm(r.as_slice().expect("row")))
            .collect();
        Ok(Self {
            key,
            samples: samples.as_standard_layout().into_owned(),
            norms,
            image_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> Array1<T> {
        mean_rows(&self.samples)
    }
}

fn mean_rows<T: Scalar>(m: &Array2<T>) -> Array1<T> {
    let mut acc = Array1::zeros(m.ncols());
    for row in m.rows() {
        acc += &row;
    }
    acc / T::from_usize(m.nrows()).expect("row count")
}

/// Indices sorted by descending value, ties by ascending index.
pub(crate) fn argsort_desc<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| crate::scalar::desc(values[a], values[b]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction<T: Scalar> {
    pub key: ComponentKey,
    /// Unit vector `r̂`.
    pub r_hat: Array1<T>,
    /// Mean contribution `b` over the whole dataset.
    pub mean: Array1<T>,
    /// 1-based principal component index.
    pub rank: usize,
    pub fit_sample_count: usize,
    pub singular_value: T,
    /// Set when the centered samples have no variance along this rank.
    pub degenerate: bool,
}

fn fix_sign<T: Scalar>(v: &mut Array1<T>) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < T::zero() {
        v.mapv_inplace(|x| -x);
    }
}

/// Fits the top `rank` principal directions of the `top_m` largest-norm samples.
pub fn principal_directions<T: Scalar>(
    samples: &ContributionSamples<T>,
    rank: usize,
    top_m: usize,
) -> Result<Vec<Direction<T>>> {
    let n = samples.len();
    let d = samples.samples.ncols();
    if top_m == 0 || top_m > n {
        return Err(Error::ArgError(format!("top_m = {top_m} must be in 1..={n}")));
    }
    if rank == 0 || rank > top_m.min(d) {
        return Err(Error::RankError {
            rank,
            max: top_m.min(d),
        });
    }
    let mean = samples.mean();
    let order = argsort_desc(&samples.norms);
    let mut centered = Array2::zeros((top_m, d));
    for (row, &i) in order.iter().take(top_m).enumerate() {
        let mut dst = centered.row_mut(row);
        dst.assign(&samples.samples.row(i));
        dst -= &mean;
    }
    let svd = right_singular_vectors(centered.view());
    Ok((0..rank)
        .map(|k| {
            let mut r_hat = svd.vectors.row(k).to_owned();
            fix_sign(&mut r_hat);
            Direction {
                key: samples.key,
                r_hat,
                mean: mean.clone(),
                rank: k + 1,
                fit_sample_count: top_m,
                singular_value: svd.values[k],
                degenerate: svd.degenerate[k],
            }
        })
        .collect())
}

/// `⟨r − b, r̂⟩·r̂ + b`.
pub fn rank1_approx<T: Scalar>(r: ArrayView1<T>, dir: &Direction<T>) -> Array1<T> {
    rank1_approx_along(r, dir, dir.r_hat.view())
}

/// Like [`rank1_approx`] but renders the coefficient along `axis` instead of `r̂`.
pub fn rank1_approx_along<T: Scalar>(r: ArrayView1<T>, dir: &Direction<T>, axis: ArrayView1<T>) -> Array1<T> {
    let x = projection(r, dir);
    let mut out = dir.mean.clone();
    out.scaled_add(x, &axis);
    out
}

fn projection<T: Scalar>(r: ArrayView1<T>, dir: &Direction<T>) -> T {
    r.iter()
        .zip(dir.mean.iter())
        .zip(dir.r_hat.iter())
        .fold(T::zero(), |acc, ((&ri, &bi), &ui)| acc + (ri - bi) * ui)
}

/// `b + Σ_k ⟨r − b, r̂_k⟩·r̂_k` over the given (orthonormal) directions.
pub fn rank_k_approx<T: Scalar>(r: ArrayView1<T>, dirs: &[Direction<T>]) -> Result<Array1<T>> {
    let first = dirs
        .first()
        .ok_or_else(|| Error::ArgError("rank-k approximation needs at least one direction".into()))?;
    let mut out = first.mean.clone();
    for dir in dirs {
        out.scaled_add(projection(r, dir), &dir.r_hat);
    }
    Ok(out)
}

/// Per-image pair coefficients for a dataset; any pair, neuron or head
/// contribution stream is materialized from them on demand.
///
/// `r^{n,h}(I) = s_I[h][n] · W_VO^{n,h}`, so the store holds `N × H × C`
/// scalars instead of `N × C × H × d` vectors.
#[derive(Debug, Clone)]
pub struct ContributionStore<'w, T: Scalar> {
    pub weights: &'w AttnPoolWeights<T>,
    /// `N × H × C`
    pub coefficients: Array3<T>,
    pub image_ids: Vec<String>,
}

impl<'w, T: Scalar> ContributionStore<'w, T> {
    /// Runs the decomposition on every activation map (`N × C × Hp × Wp`).
    pub fn collect(
        activations: ArrayView4<T>,
        weights: &'w AttnPoolWeights<T>,
        image_ids: Vec<String>,
    ) -> Result<Self> {
        let n = activations.shape()[0];
        if n == 0 {
            return Err(Error::ArgError("empty dataset".into()));
        }
        if image_ids.len() != n {
            return Err(Error::ArgError(format!("{} image ids for {n} images", image_ids.len())));
        }
        let per_image: Vec<Array2<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let tokens = build_tokens(activations.index_axis(Axis(0), i), weights)?;
                let attn = attention_weights(&tokens, weights);
                Ok(pair_coefficients(&tokens, &attn))
            })
            .collect::<Result<_>>()?;
        let mut coefficients = Array3::zeros((n, weights.heads, weights.channels()));
        for (i, c) in per_image.iter().enumerate() {
            coefficients.index_axis_mut(Axis(0), i).assign(c);
        }
        Ok(Self {
            weights,
            coefficients,
            image_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.coefficients.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn materialize(&self, key: ComponentKey) -> Array2<T> {
        let ov = self.weights.ov();
        let (c, heads, d) = (self.weights.channels(), self.weights.heads, self.weights.embed_dim());
        let mut out = Array2::zeros((self.len(), d));
        for i in 0..self.len() {
            let mut row = out.row_mut(i);
            match key {
                ComponentKey::Pair { neuron, head } => {
                    row.scaled_add(self.coefficients[[i, head, neuron]], &ov.slice(s![head, neuron, ..]))
                }
                ComponentKey::Neuron(n) => {
                    for h in 0..heads {
                        row.scaled_add(self.coefficients[[i, h, n]], &ov.slice(s![h, n, ..]));
                    }
                }
                ComponentKey::Head(h) => {
                    for n in 0..c {
                        row.scaled_add(self.coefficients[[i, h, n]], &ov.slice(s![h, n, ..]));
                    }
                }
            }
        }
        out
    }

    pub fn samples(&self, key: ComponentKey) -> Result<ContributionSamples<T>> {
        self.check_key(key)?;
        ContributionSamples::new(key, self.materialize(key), self.image_ids.clone())
    }

    fn check_key(&self, key: ComponentKey) -> Result<()> {
        let (c, heads) = (self.weights.channels(), self.weights.heads);
        let ok = match key {
            ComponentKey::Pair { neuron, head } => neuron < c && head < heads,
            ComponentKey::Neuron(n) => n < c,
            ComponentKey::Head(h) => h < heads,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ArgError(format!("component {key} out of range")))
        }
    }

    /// Contribution norms of every pair, `P × N`, pair index neuron-major.
    pub fn pair_norms(&self) -> Vec<Vec<T>> {
        let ov = self.weights.ov();
        let heads = self.weights.heads;
        (0..self.weights.pair_count())
            .into_par_iter()
            .map(|p| {
                let (n, h) = (p / heads, p % heads);
                let row_norm = norm(ov.slice(s![h, n, ..]).as_slice().expect("contiguous ov"));
                (0..self.len())
                    .map(|i| self.coefficients[[i, h, n]].abs() * row_norm)
                    .collect()
            })
            .collect()
    }

    /// Contribution norms of every neuron, `C × N`.
    pub fn neuron_norms(&self) -> Vec<Vec<T>> {
        (0..self.weights.channels())
            .into_par_iter()
            .map(|n| {
                let m = self.materialize(ComponentKey::Neuron(n));
                m.rows().into_iter().map(|r| norm(r.as_slice().expect("row"))).collect()
            })
            .collect()
    }

    /// Mean pair contributions, `P × d`.
    pub fn pair_means(&self) -> Array2<T> {
        let ov = self.weights.ov();
        let (c, heads, d) = (self.weights.channels(), self.weights.heads, self.weights.embed_dim());
        let mean_coef = self.mean_coefficients();
        let mut out = Array2::zeros((c * heads, d));
        for n in 0..c {
            for h in 0..heads {
                out.row_mut(n * heads + h)
                    .assign(&ov.slice(s![h, n, ..]).mapv(|x| x * mean_coef[[h, n]]));
            }
        }
        out
    }

    /// Mean neuron contributions, `C × d`.
    pub fn neuron_means(&self) -> Array2<T> {
        let ov = self.weights.ov();
        let (c, heads, d) = (self.weights.channels(), self.weights.heads, self.weights.embed_dim());
        let mean_coef = self.mean_coefficients();
        let mut out = Array2::zeros((c, d));
        for n in 0..c {
            let mut row = out.row_mut(n);
            for h in 0..heads {
                row.scaled_add(mean_coef[[h, n]], &ov.slice(s![h, n, ..]));
            }
        }
        out
    }

    fn mean_coefficients(&self) -> Array2<T> {
        let (_, heads, c) = self.coefficients.dim();
        let mut acc = Array2::zeros((heads, c));
        for c in self.coefficients.outer_iter() {
            acc += &c;
        }
        acc / T::from_usize(self.len()).expect("count")
    }

    /// Rank-1 direction for every pair, in pair-index order.
    pub fn fit_pair_directions(&self, top_m: usize) -> Result<Vec<Direction<T>>> {
        let heads = self.weights.heads;
        (0..self.weights.pair_count())
            .into_par_iter()
            .map(|p| {
                let key = ComponentKey::Pair {
                    neuron: p / heads,
                    head: p % heads,
                };
                let mut dirs = principal_directions(&self.samples(key)?, 1, top_m)?;
                Ok(dirs.remove(0))
            })
            .collect()
    }

    /// Top `rank` directions for every neuron.
    pub fn fit_neuron_directions(&self, top_m: usize, rank: usize) -> Result<Vec<Vec<Direction<T>>>> {
        (0..self.weights.channels())
            .into_par_iter()
            .map(|n| principal_directions(&self.samples(ComponentKey::Neuron(n))?, rank, top_m))
            .collect()
    }
}

/// Fitted directions for all pairs and/or all neurons of one model.
#[derive(Debug, Clone, Default)]
pub struct DirectionSet<T: Scalar> {
    pub heads: usize,
    /// Indexed by `neuron * H + head`.
    pub pairs: Option<Vec<Direction<T>>>,
    /// Indexed by neuron, then rank.
    pub neurons: Option<Vec<Vec<Direction<T>>>>,
}

impl<T: Scalar> DirectionSet<T> {
    pub fn pair(&self, neuron: usize, head: usize) -> Result<&Direction<T>> {
        self.pairs
            .as_ref()
            .and_then(|p| p.get(neuron * self.heads + head))
            .ok_or_else(|| Error::MissingDirection(ComponentKey::Pair { neuron, head }.to_string()))
    }

    pub fn neuron(&self, neuron: usize, rank: usize) -> Result<&[Direction<T>]> {
        let dirs = self
            .neurons
            .as_ref()
            .and_then(|n| n.get(neuron))
            .ok_or_else(|| Error::MissingDirection(ComponentKey::Neuron(neuron).to_string()))?;
        if dirs.len() < rank {
            return Err(Error::MissingDirection(format!("n{neuron} rank {rank}")));
        }
        Ok(&dirs[..rank])
    }

    /// Tensors `dirs.r_hat`/`dirs.mean` (`P × d`) and
    /// `dirs.neuron.r_hat` (`C × R × d`)/`dirs.neuron.mean` (`C × d`).
    pub fn to_tensors(&self) -> TensorMap {
        let mut map = TensorMap::new();
        if let Some(pairs) = &self.pairs {
            if let Some(first) = pairs.first() {
                let d = first.r_hat.len();
                let mut r = Vec::with_capacity(pairs.len() * d);
                let mut m = Vec::with_capacity(pairs.len() * d);
                for p in pairs {
                    r.extend(p.r_hat.iter().map(|x| x.as_f32()));
                    m.extend(p.mean.iter().map(|x| x.as_f32()));
                }
                map.insert(names::DIRS_R_HAT.into(), Tensor::new(vec![pairs.len(), d], r));
                map.insert(names::DIRS_MEAN.into(), Tensor::new(vec![pairs.len(), d], m));
            }
        }
        if let Some(neurons) = &self.neurons {
            if let Some(first) = neurons.first().and_then(|n| n.first()) {
                let d = first.r_hat.len();
                let rank = neurons[0].len();
                let mut r = Vec::new();
                let mut m = Vec::new();
                for dirs in neurons {
                    for dir in dirs {
                        r.extend(dir.r_hat.iter().map(|x| x.as_f32()));
                    }
                    m.extend(dirs[0].mean.iter().map(|x| x.as_f32()));
                }
                map.insert(
                    names::DIRS_NEURON_R_HAT.into(),
                    Tensor::new(vec![neurons.len(), rank, d], r),
                );
                map.insert(names::DIRS_NEURON_MEAN.into(), Tensor::new(vec![neurons.len(), d], m));
            }
        }
        map
    }

    /// Key table: one line per stored direction row.
    pub fn key_table(&self) -> Vec<String> {
        let mut lines = vec!["tensor,row,kind,neuron,head,rank".to_string()];
        if let Some(pairs) = &self.pairs {
            for (i, p) in pairs.iter().enumerate() {
                if let ComponentKey::Pair { neuron, head } = p.key {
                    lines.push(format!("{},{i},pair,{neuron},{head},1", names::DIRS_R_HAT));
                }
            }
        }
        if let Some(neurons) = &self.neurons {
            for (n, dirs) in neurons.iter().enumerate() {
                for dir in dirs {
                    lines.push(format!("{},{n},neuron,{n},,{}", names::DIRS_NEURON_R_HAT, dir.rank));
                }
            }
        }
        lines
    }

    pub fn write(&self, path: impl AsRef<Path>, mut metadata: BTreeMap<String, String>) -> Result<()> {
        metadata.insert("H".into(), self.heads.to_string());
        write_bundle(&self.to_tensors(), &metadata, path.as_ref())?;
        crate::bundle::write_lines(path.as_ref().join("keys.csv"), &self.key_table())
    }

    /// Loads whatever direction tensors the bundle holds.
    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let heads = bundle.meta_usize("H")?;
        let mut set = DirectionSet {
            heads,
            pairs: None,
            neurons: None,
        };
        if bundle.contains(names::DIRS_R_HAT) {
            let r: Array2<T> = bundle
                .tensor(names::DIRS_R_HAT)?
                .into_dimensionality()
                .map_err(shape_err)?;
            let shape = r.shape().to_vec();
            let m: Array2<T> = bundle
                .tensor_with_shape(names::DIRS_MEAN, &shape)?
                .into_dimensionality()
                .map_err(shape_err)?;
            set.pairs = Some(
                (0..r.nrows())
                    .map(|p| Direction {
                        key: ComponentKey::Pair {
                            neuron: p / heads,
                            head: p % heads,
                        },
                        r_hat: r.row(p).to_owned(),
                        mean: m.row(p).to_owned(),
                        rank: 1,
                        fit_sample_count: 0,
                        singular_value: T::zero(),
                        degenerate: false,
                    })
                    .collect(),
            );
        }
        if bundle.contains(names::DIRS_NEURON_R_HAT) {
            let r: Array3<T> = bundle
                .tensor(names::DIRS_NEURON_R_HAT)?
                .into_dimensionality()
                .map_err(shape_err)?;
            let (c, rank, d) = r.dim();
            let m: Array2<T> = bundle
                .tensor_with_shape(names::DIRS_NEURON_MEAN, &[c, d])?
                .into_dimensionality()
                .map_err(shape_err)?;
            set.neurons = Some(
                (0..c)
                    .map(|n| {
                        (0..rank)
                            .map(|k| Direction {
                                key: ComponentKey::Neuron(n),
                                r_hat: r.slice(s![n, k, ..]).to_owned(),
                                mean: m.row(n).to_owned(),
                                rank: k + 1,
                                fit_sample_count: 0,
                                singular_value: T::zero(),
                                degenerate: false,
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
        Ok(set)
    }
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::ArgError(format!("direction tensor has unexpected rank: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconstructionMode {
    Baseline,
    PairRank1,
    /// Neuron contributions from their top `k` directions.
    NeuronRank(usize),
}

impl fmt::Display for ReconstructionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Baseline => f.write_str("baseline"),
            Self::PairRank1 => f.write_str("pair_rank1"),
            Self::NeuronRank(k) => write!(f, "neuron_rank_{k}"),
        }
    }
}

impl FromStr for ReconstructionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "pair_rank1" => Ok(Self::PairRank1),
            _ => s
                .strip_prefix("neuron_rank_")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(Self::NeuronRank)
                .ok_or_else(|| Error::ArgError(format!("unknown reconstruction mode `{s}`"))),
        }
    }
}

pub fn reconstruct_embedding<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    mode: ReconstructionMode,
    dirs: &DirectionSet<T>,
) -> Result<Array1<T>> {
    reconstruct_embedding_with(z, w, mode, dirs, None)
}

/// Reconstruction where the rendered axis of every rank-1 component can be
/// swapped for `replacements[i]` (pair index, or neuron index for
/// `NeuronRank(1)`); coefficients are still projections onto the fitted `r̂`.
pub fn reconstruct_embedding_with<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    mode: ReconstructionMode,
    dirs: &DirectionSet<T>,
    replacements: Option<&[Array1<T>]>,
) -> Result<Array1<T>> {
    let tokens = build_tokens(z, w)?;
    let attn = attention_weights(&tokens, w);
    let d = w.embed_dim();
    let mut out = Array1::zeros(d);
    match mode {
        ReconstructionMode::Baseline => return Ok(forward_with_attention(&tokens, &attn, w)),
        ReconstructionMode::PairRank1 => {
            let dec = decompose_tokens(&tokens, &attn, w, DecompositionLevel::NeuronHead);
            for n in 0..w.channels() {
                for h in 0..w.heads {
                    let dir = dirs.pair(n, h)?;
                    let r = dec.values.slice(s![n, h, ..]);
                    let approx = match replacements {
                        Some(rep) => rank1_approx_along(r, dir, rep[w.pair_index(n, h)].view()),
                        None => rank1_approx(r, dir),
                    };
                    out += &approx;
                }
            }
        }
        ReconstructionMode::NeuronRank(k) => {
            let dec = decompose_tokens(&tokens, &attn, w, DecompositionLevel::Neuron);
            for n in 0..w.channels() {
                let nd = dirs.neuron(n, k)?;
                let r = dec.values.slice(s![n, ..]);
                let approx = match replacements {
                    Some(rep) if k == 1 => rank1_approx_along(r, &nd[0], rep[n].view()),
                    Some(_) => {
                        return Err(Error::ArgError(
                            "direction replacement only applies to rank-1 neuron reconstruction".into(),
                        ))
                    }
                    None => rank_k_approx(r, nd)?,
                };
                out += &approx;
            }
        }
    }
    let (beta, b_o) = crate::attnpool::bias_terms(w);
    for row in beta.rows() {
        out += &row;
    }
    Ok(out + &b_o)
}

/// Relative residual of the rank-`k` fit on the fit samples; used to check
/// that adding directions never hurts.
pub fn fit_residual<T: Scalar>(samples: &ContributionSamples<T>, dirs: &[Direction<T>]) -> Result<T> {
    let mut total = T::zero();
    for row in samples.samples.rows() {
        let approx = rank_k_approx(row, dirs)?;
        let diff: Vec<T> = row.iter().zip(approx.iter()).map(|(&a, &b)| a - b).collect();
        total += dot(&diff, &diff);
    }
    Ok(total.sqrt())
}
