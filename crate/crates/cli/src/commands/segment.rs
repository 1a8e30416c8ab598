use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use nad_core::analysis::register_intervention;
use nad_core::segmentation::{segment_image, select_topk_pairs, ConfusionMatrix, WindowLayout, IGNORE_LABEL};
use nad_core::{write_bundle, Tensor, TensorBundle, TensorMap};
use ndarray::{Array2, Axis, Ix2};
use serde::Serialize;

use crate::args::SegmentArgs;
use crate::inputs::{class_bank, integer_tensor, per_image, Data};
use crate::output::OutDir;

pub const WINDOWS: &str = "seg.windows";
pub const IMAGE_SIZE: &str = "seg.image_size";

fn gt_name(i: usize) -> String {
    format!("seg.gt.{i}")
}

#[derive(Serialize)]
struct ClassIou {
    class: String,
    iou: Option<f64>,
}

#[derive(Serialize)]
struct Metrics {
    images: usize,
    windows: usize,
    classes: usize,
    k: usize,
    window: usize,
    stride: usize,
    variant: String,
    miou: Option<f64>,
    pixels: u64,
    per_class: Vec<ClassIou>,
}

/// Image sizes, the image each window belongs to and one layout per image.
fn layouts(
    bundle: &TensorBundle,
    windows: usize,
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<WindowLayout>)> {
    let sizes: Vec<(usize, usize)> = if bundle.contains(IMAGE_SIZE) {
        let s = integer_tensor(bundle, IMAGE_SIZE)?;
        if s.len() % 2 != 0 {
            bail!("`{IMAGE_SIZE}` must be N × 2");
        }
        s.chunks(2).map(|c| (c[0], c[1])).collect()
    } else {
        // Every window is an image of its own.
        vec![(window, window); windows]
    };
    if bundle.contains(WINDOWS) {
        let raw = integer_tensor(bundle, WINDOWS)?;
        if raw.len() != windows * 3 {
            bail!("`{WINDOWS}` must be {windows} × 3 (image, top, left)");
        }
        let mut owners = Vec::with_capacity(windows);
        let mut offsets = vec![Vec::new(); sizes.len()];
        for c in raw.chunks(3) {
            if c[0] >= sizes.len() {
                bail!("window refers to image {} of {}", c[0], sizes.len());
            }
            owners.push(c[0]);
            offsets[c[0]].push((c[1], c[2]));
        }
        let layouts = sizes
            .iter()
            .zip(offsets)
            .map(|(&size, off)| Ok(WindowLayout::from_offsets(size, window, off)?))
            .collect::<Result<_>>()?;
        Ok((owners, layouts))
    } else {
        let layouts: Vec<WindowLayout> = sizes
            .iter()
            .map(|&s| WindowLayout::new(s, window, stride))
            .collect::<nad_core::Result<_>>()?;
        let owners: Vec<usize> = layouts
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.offsets.len()))
            .collect();
        if owners.len() != windows {
            bail!(
                "the {window}/{stride} layout gives {} windows but the bundle holds {windows}",
                owners.len()
            );
        }
        Ok((owners, layouts))
    }
}

pub fn run(a: &SegmentArgs, out: &OutDir) -> Result<()> {
    let mut data = Data::load(&a.data)?;
    let (window, stride, k) = (a.window as usize, a.stride as usize, a.k as usize);
    if let Some(neurons) = &a.register_neurons {
        log::info!("zeroing register neurons {:?}", neurons.0);
        for mut z in data.acts.axis_iter_mut(Axis(0)) {
            let modified = register_intervention(z.view(), &neurons.0)?;
            z.assign(&modified);
        }
    }
    let bank = class_bank(&a.classes, &a.templates)?;
    let dirs = data.directions(&a.fit, true, None)?;
    let pair_dirs = dirs.pairs.as_deref().context("no pair directions")?;
    let plans: Vec<Vec<(usize, usize)>> = (0..bank.len())
        .map(|j| select_topk_pairs(pair_dirs, data.weights.heads, bank.embeds.row(j), k))
        .collect::<nad_core::Result<_>>()?;
    log::info!("{} classes, top {k} pairs each", bank.len());

    let (owners, layouts) = layouts(&data.bundle, data.len(), window, stride)?;
    let groups = per_image(&data.acts, &owners, layouts.len());
    let mut cm = ConfusionMatrix::new(bank.len());
    let mut with_gt = 0;
    let mut preds = TensorMap::new();
    for (i, (views, layout)) in groups.iter().zip(&layouts).enumerate() {
        let pred = segment_image(
            views,
            layout,
            &data.weights,
            bank.embeds.view(),
            &plans,
            a.variant,
            bank.names.clone(),
        )?;
        if data.bundle.contains(&gt_name(i)) {
            let gt: Array2<usize> = data
                .bundle
                .tensor::<f64>(&gt_name(i))?
                .into_dimensionality::<Ix2>()
                .with_context(|| format!("`{}` must be h × w", gt_name(i)))?
                .mapv(|v| v as usize);
            cm.add(pred.labels.view(), gt.view(), IGNORE_LABEL)
                .with_context(|| format!("scoring image {i}"))?;
            with_gt += 1;
        }
        let shape = pred.labels.shape().to_vec();
        preds.insert(
            format!("pred.{i}"),
            Tensor::new(shape, pred.labels.iter().map(|&l| l as f32).collect()),
        );
    }
    let mut meta = BTreeMap::new();
    meta.insert("classes".into(), bank.len().to_string());
    write_bundle(&preds, &meta, out.path("pred"))?;
    nad_core::bundle::write_lines(out.path("pred").join("classes.txt"), &bank.names)?;
    log::info!("wrote {}", out.path("pred").display());

    let (miou, pixels, per_class) = if with_gt > 0 {
        let r = cm.report()?;
        (Some(r.mean), r.pixels, r.per_class)
    } else {
        log::warn!("no ground truth in the bundle; mIoU not computed");
        (None, 0, vec![None; bank.len()])
    };
    if let Some(m) = miou {
        println!("mIoU {m} over {with_gt} images");
    }
    out.json(
        "metrics.json",
        &Metrics {
            images: layouts.len(),
            windows: data.len(),
            classes: bank.len(),
            k,
            window,
            stride,
            variant: a.variant.to_string(),
            miou,
            pixels,
            per_class: bank
                .names
                .iter()
                .zip(per_class)
                .map(|(c, iou)| ClassIou { class: c.clone(), iou })
                .collect(),
        },
    )
}
