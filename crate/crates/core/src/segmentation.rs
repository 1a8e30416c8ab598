//! Training-free segmentation from neuron channels and per-head similarity
//! maps, with sliding-window inference and mIoU scoring.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnpool::{attention_weights, build_tokens, AttnPoolWeights};
use crate::directions::{argsort_desc, Direction};
use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

pub const DEFAULT_K: usize = 20000;
pub const DEFAULT_WINDOW: usize = 384;
pub const DEFAULT_STRIDE: usize = 192;
pub const IGNORE_LABEL: usize = 255;

/// Pairs `(n, h)` whose direction is most cosine-similar to `class_embed`.
///
/// `pair_dirs[n * heads + h]` is the direction of pair `(n, h)`.
pub fn select_topk_pairs<T: Scalar>(
    pair_dirs: &[Direction<T>],
    heads: usize,
    class_embed: ArrayView1<T>,
    k: usize,
) -> Result<Vec<(usize, usize)>> {
    if heads == 0 || !pair_dirs.len().is_multiple_of(heads) {
        return Err(Error::ArgError(format!(
            "{} pair directions for {heads} heads",
            pair_dirs.len()
        )));
    }
    if k == 0 || k > pair_dirs.len() {
        return Err(Error::ArgError(format!("k={k} must be in 1..={}", pair_dirs.len())));
    }
    let t = class_embed.to_vec();
    let t_norm = norm(&t);
    if t_norm == T::zero() {
        return Err(Error::ZeroVector);
    }
    let scores: Vec<T> = pair_dirs
        .iter()
        .map(|dir| {
            if dir.r_hat.len() != t.len() {
                return Err(Error::shape("pair direction", &[t.len()], dir.r_hat.shape()));
            }
            let r = dir.r_hat.as_slice().expect("contiguous");
            let rn = norm(r);
            Ok(if rn == T::zero() {
                T::zero()
            } else {
                dot(r, &t) / (rn * t_norm)
            })
        })
        .collect::<Result<_>>()?;
    Ok(argsort_desc(&scores)
        .into_iter()
        .take(k)
        .map(|p| (p / heads, p % heads))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack<T: Scalar> {
    /// `H × Hp × Wp`
    pub maps: Array3<T>,
    /// `(top, left)` of the source window, if any.
    pub window: Option<(usize, usize)>,
}

/// `L[h, y, x] = ⟨r^h_i, t⟩` for spatial token `i = 1 + y·Wp + x`.
///
/// Computed as `a[h][i] · ⟨z'_i, W_VO^h t⟩`, which avoids materializing the
/// head-token contributions.
pub fn head_similarity_maps<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    class_embed: ArrayView1<T>,
) -> Result<HeatmapStack<T>> {
    if class_embed.len() != w.embed_dim() {
        return Err(Error::shape("class embedding", &[w.embed_dim()], class_embed.shape()));
    }
    let tokens = build_tokens(z, w)?;
    let attn = attention_weights(&tokens, w);
    let (hp, wp) = w.grid;
    let ov = w.ov();
    let mut maps = Array3::zeros((w.heads, hp, wp));
    for h in 0..w.heads {
        let u = ov.index_axis(Axis(0), h).dot(&class_embed);
        for y in 0..hp {
            for x in 0..wp {
                let i = 1 + y * wp + x;
                maps[[h, y, x]] = attn.weights[[h, i]] * tokens.tokens.row(i).dot(&u);
            }
        }
    }
    Ok(HeatmapStack { maps, window: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapVariant {
    /// `Σ_r Z^{n_r} ∘ L^{h_r}`
    #[default]
    Combined,
    /// Similarity maps replaced by ones.
    NeuronOnly,
    /// Activation channels replaced by ones.
    HeadOnly,
}

impl fmt::Display for HeatmapVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Combined => "combined",
            Self::NeuronOnly => "neuron_only",
            Self::HeadOnly => "head_only",
        })
    }
}

impl FromStr for HeatmapVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Self::Combined),
            "neuron_only" => Ok(Self::NeuronOnly),
            "head_only" => Ok(Self::HeadOnly),
            _ => Err(Error::ArgError(format!("unknown heatmap variant `{s}`"))),
        }
    }
}

/// Class logits on the activation grid.
pub fn class_heatmap<T: Scalar>(
    z: ArrayView3<T>,
    stack: &HeatmapStack<T>,
    pairs: &[(usize, usize)],
    variant: HeatmapVariant,
) -> Result<Array2<T>> {
    if pairs.is_empty() {
        return Err(Error::ArgError("class heatmap needs at least one pair".into()));
    }
    let (c, hp, wp) = z.dim();
    let (heads, sh, sw) = stack.maps.dim();
    if (sh, sw) != (hp, wp) {
        return Err(Error::shape("similarity stack", &[heads, hp, wp], stack.maps.shape()));
    }
    let mut out = Array2::zeros((hp, wp));
    for &(n, h) in pairs {
        if n >= c || h >= heads {
            return Err(Error::ArgError(format!(
                "pair ({n}, {h}) out of range for C={c}, H={heads}"
            )));
        }
        let zn = z.index_axis(Axis(0), n);
        let lh = stack.maps.index_axis(Axis(0), h);
        match variant {
            HeatmapVariant::Combined => out.zip_mut_with(&(&zn * &lh), |o, &v| *o += v),
            HeatmapVariant::NeuronOnly => out += &zn,
            HeatmapVariant::HeadOnly => out += &lh,
        }
    }
    Ok(out)
}

/// Rescales to `[0, 1]`; constant maps become zeros. For display only.
pub fn normalize_minmax<T: Scalar>(map: ArrayView2<T>) -> Array2<T> {
    let lo = map.iter().fold(T::infinity(), |a, &b| a.min(b));
    let hi = map.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if hi > lo {
        map.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(map.raw_dim())
    }
}

/// Source coordinate and blend weight for half-pixel-center sampling.
fn source_taps(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers (corners not aligned).
pub fn upsample_bilinear<T: Scalar>(map: ArrayView2<T>, target: (usize, usize)) -> Result<Array2<T>> {
    let (sh, sw) = map.dim();
    if sh == 0 || sw == 0 || target.0 < sh || target.1 < sw {
        return Err(Error::ArgError(format!(
            "bilinear target {target:?} smaller than source {:?}",
            (sh, sw)
        )));
    }
    let rows = source_taps(target.0, sh);
    let cols = source_taps(target.1, sw);
    Ok(Array2::from_shape_fn(target, |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let (fy, fx) = (T::lit(fy), T::lit(fx));
        let top = map[[y0, x0]] * (T::one() - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (T::one() - fx) + map[[y1, x1]] * fx;
        top * (T::one() - fy) + bottom * fy
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    /// `(height, width)`
    pub image: (usize, usize),
    pub window: usize,
    pub stride: usize,
    /// `(top, left)` per window.
    pub offsets: Vec<(usize, usize)>,
}

fn axis_offsets(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    if dim <= window {
        return vec![0];
    }
    let n = (dim - window).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(dim - window)).collect()
}

impl WindowLayout {
    /// Regular grid of windows; the last window on each axis is shifted
    /// back to end at the border. An axis shorter than the window gets one
    /// window at offset 0 whose excess is padding.
    pub fn new(image: (usize, usize), window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 || image.0 == 0 || image.1 == 0 {
            return Err(Error::LayoutError(format!(
                "invalid layout: image {image:?}, window {window}, stride {stride}"
            )));
        }
        let ys = axis_offsets(image.0, window, stride);
        let xs = axis_offsets(image.1, window, stride);
        let offsets = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
        Ok(Self {
            image,
            window,
            stride,
            offsets,
        })
    }

    /// Explicit offsets, e.g. read back from a bundle.
    pub fn from_offsets(image: (usize, usize), window: usize, offsets: Vec<(usize, usize)>) -> Result<Self> {
        if window == 0 || offsets.is_empty() {
            return Err(Error::LayoutError(
                "layout needs a positive window and at least one offset".into(),
            ));
        }
        for &(y, x) in &offsets {
            if y >= image.0 || x >= image.1 {
                return Err(Error::LayoutError(format!(
                    "window offset ({y}, {x}) outside image {image:?}"
                )));
            }
        }
        Ok(Self {
            image,
            window,
            stride: 0,
            offsets,
        })
    }

    /// Pixel ranges of window `i` clipped to the image.
    fn extent(&self, i: usize) -> ((usize, usize), (usize, usize)) {
        let (y, x) = self.offsets[i];
        (
            (y, (y + self.window).min(self.image.0)),
            (x, (x + self.window).min(self.image.1)),
        )
    }
}

/// Averages per-window logits (`J × window × window`) over the image.
pub fn stitch_windows<T: Scalar>(per_window: &[Array3<T>], layout: &WindowLayout) -> Result<Array3<T>> {
    if per_window.len() != layout.offsets.len() {
        return Err(Error::LayoutError(format!(
            "{} window logits for {} windows",
            per_window.len(),
            layout.offsets.len()
        )));
    }
    let classes = per_window.first().map(|w| w.shape()[0]).unwrap_or(0);
    let (h, w) = layout.image;
    let mut sum = Array3::<T>::zeros((classes, h, w));
    let mut lo = Array3::from_elem((classes, h, w), T::infinity());
    let mut hi = Array3::from_elem((classes, h, w), T::neg_infinity());
    let mut count = Array2::<u32>::zeros((h, w));
    for (i, logits) in per_window.iter().enumerate() {
        if logits.shape() != [classes, layout.window, layout.window] {
            return Err(Error::LayoutError(format!(
                "window {i} logits have shape {:?}, expected {:?}",
                logits.shape(),
                [classes, layout.window, layout.window]
            )));
        }
        let ((y0, y1), (x0, x1)) = layout.extent(i);
        let src = logits.slice(s![.., ..y1 - y0, ..x1 - x0]);
        let mut dst = sum.slice_mut(s![.., y0..y1, x0..x1]);
        dst += &src;
        lo.slice_mut(s![.., y0..y1, x0..x1])
            .zip_mut_with(&src, |m, &v| *m = m.min(v));
        hi.slice_mut(s![.., y0..y1, x0..x1])
            .zip_mut_with(&src, |m, &v| *m = m.max(v));
        count.slice_mut(s![y0..y1, x0..x1]).mapv_inplace(|c| c + 1);
    }
    if let Some(((y, x), _)) = count.indexed_iter().find(|(_, &c)| c == 0) {
        return Err(Error::LayoutError(format!(
            "pixel ({y}, {x}) is not covered by any window"
        )));
    }
    // Clamping to the contributing range removes rounding drift, so
    // overlapping identical windows reproduce their value exactly.
    for ((c, y, x), v) in sum.indexed_iter_mut() {
        let mean = *v / T::from_u32(count[[y, x]]).expect("count");
        *v = mean.max(lo[[c, y, x]]).min(hi[[c, y, x]]);
    }
    Ok(sum)
}

/// Per-pixel argmax over classes; ties go to the lowest class.
pub fn argmax_labels<T: Scalar>(logits: ArrayView3<T>) -> Array2<usize> {
    let (j, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..j {
            if logits[[c, y, x]] > logits[[best, y, x]] {
                best = c;
            }
        }
        best
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction<T: Scalar> {
    /// `J × h × w`
    pub logits: Array3<T>,
    pub labels: Array2<usize>,
    pub classes: Vec<String>,
}

/// Upsampled logits of one window, `J × window × window`.
pub fn window_logits<T: Scalar>(
    z: ArrayView3<T>,
    w: &AttnPoolWeights<T>,
    class_embeds: ArrayView2<T>,
    plans: &[Vec<(usize, usize)>],
    variant: HeatmapVariant,
    window: usize,
) -> Result<Array3<T>> {
    if plans.len() != class_embeds.nrows() {
        return Err(Error::ArgError(format!(
            "{} pair lists for {} classes",
            plans.len(),
            class_embeds.nrows()
        )));
    }
    let mut out = Array3::zeros((plans.len(), window, window));
    for (j, pairs) in plans.iter().enumerate() {
        let stack = match variant {
            // Similarity maps are unused; skip the attention pass.
            HeatmapVariant::NeuronOnly => HeatmapStack {
                maps: Array3::zeros((w.heads, w.grid.0, w.grid.1)),
                window: None,
            },
            _ => head_similarity_maps(z, w, class_embeds.row(j))?,
        };
        let map = class_heatmap(z, &stack, pairs, variant)?;
        out.index_axis_mut(Axis(0), j)
            .assign(&upsample_bilinear(map.view(), (window, window))?);
    }
    Ok(out)
}

/// Full sliding-window segmentation of one image.
pub fn segment_image<T: Scalar>(
    windows: &[ArrayView3<T>],
    layout: &WindowLayout,
    w: &AttnPoolWeights<T>,
    class_embeds: ArrayView2<T>,
    plans: &[Vec<(usize, usize)>],
    variant: HeatmapVariant,
    classes: Vec<String>,
) -> Result<SegPrediction<T>> {
    let per_window: Vec<Array3<T>> = windows
        .par_iter()
        .map(|z| window_logits(*z, w, class_embeds, plans, variant, layout.window))
        .collect::<Result<_>>()?;
    let logits = stitch_windows(&per_window, layout)?;
    let labels = argmax_labels(logits.view());
    Ok(SegPrediction {
        logits,
        labels,
        classes,
    })
}

/// Pixel confusion counts, `gt × pred`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Array2<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: Array2::zeros((classes, classes)),
        }
    }

    pub fn add(&mut self, pred: ArrayView2<usize>, gt: ArrayView2<usize>, ignore: usize) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape("prediction", gt.shape(), pred.shape()));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == ignore {
                continue;
            }
            if g >= self.classes || p >= self.classes {
                return Err(Error::ArgError(format!(
                    "label (gt {g}, pred {p}) out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[[g, p]] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MiouReport> {
        let pixels: u64 = self.counts.sum();
        if pixels == 0 {
            return Err(Error::Undefined("mIoU over zero valid pixels".into()));
        }
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.counts[[c, c]];
                let gt_total: u64 = self.counts.row(c).sum();
                let pred_total: u64 = self.counts.column(c).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport {
            per_class,
            mean,
            pixels,
        })
    }
}

/// IoU per class and their mean over classes present in either map.
pub fn miou(pred: ArrayView2<usize>, gt: ArrayView2<usize>, num_classes: usize, ignore: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt, ignore)?;
    cm.report()
}
