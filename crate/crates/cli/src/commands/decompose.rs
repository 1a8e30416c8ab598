use std::collections::BTreeMap;

use anyhow::{bail, Result};
use nad_core::attnpool::{bias_terms, decompose};
use nad_core::bundle::model_metadata;
use nad_core::{pool, write_bundle, Tensor, TensorMap};
use ndarray::Axis;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::DecomposeArgs;
use crate::inputs::Data;
use crate::output::OutDir;

#[derive(Serialize)]
struct CheckReport {
    level: String,
    images: usize,
    tolerance: f64,
    max_relative_error: f64,
    worst_image: String,
    passed: bool,
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn run(a: &DecomposeArgs, out: Option<&OutDir>) -> Result<()> {
    let data = Data::load(&a.data)?;
    let w = &data.weights;
    let keep_values = out.is_some();
    let per_image: Vec<(Vec<f32>, f64)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let z = data.acts.index_axis(Axis(0), i);
            let dec = decompose(z, w, a.level)?;
            let err = if a.check {
                let dense = pool(z, w)?;
                relative_error(dec.reconstruct().as_slice().unwrap(), dense.as_slice().unwrap())
            } else {
                0.0
            };
            let values = if keep_values {
                dec.values.iter().map(|&v| v as f32).collect()
            } else {
                Vec::new()
            };
            Ok((values, err))
        })
        .collect::<nad_core::Result<_>>()?;

    if let Some(out) = out {
        let level_shape = a
            .level
            .shape(w.channels(), w.heads, w.spatial_tokens() + 1, w.embed_dim());
        let mut shape = vec![data.len()];
        shape.extend(level_shape);
        let mut values = Vec::with_capacity(shape.iter().product());
        for (v, _) in &per_image {
            values.extend_from_slice(v);
        }
        let (beta, b_o) = bias_terms(w);
        let mut tensors = TensorMap::new();
        tensors.insert(format!("decomp.{}", a.level), Tensor::new(shape, values));
        tensors.insert("decomp.head_bias".into(), Tensor::from_array(&beta.into_dyn()));
        tensors.insert("decomp.out_bias".into(), Tensor::from_array(&b_o.into_dyn()));
        let mut meta: BTreeMap<String, String> = model_metadata(w);
        meta.insert("level".into(), a.level.to_string());
        write_bundle(&tensors, &meta, out.path("decomp"))?;
        log::info!("wrote {}", out.path("decomp").display());
    }

    if a.check {
        let (worst, max_err) = per_image.iter().enumerate().fold(
            (0, 0.0f64),
            |(bi, be), (i, (_, e))| if *e > be { (i, *e) } else { (bi, be) },
        );
        let passed = max_err < a.tolerance;
        let report = CheckReport {
            level: a.level.to_string(),
            images: data.len(),
            tolerance: a.tolerance,
            max_relative_error: max_err,
            worst_image: data.ids.get(worst).cloned().unwrap_or_default(),
            passed,
        };
        println!(
            "check {}: {} images, max relative error {:e} (tolerance {:e})",
            if passed { "passed" } else { "FAILED" },
            report.images,
            max_err,
            a.tolerance
        );
        if let Some(out) = out {
            out.json("check.json", &report)?;
        }
        if !passed {
            bail!(
                "image {} reconstructs with relative error {max_err:e} > {:e}",
                report.worst_image,
                a.tolerance
            );
        }
    } else {
        println!("decomposed {} images at level {}", data.len(), a.level);
    }
    Ok(())
}
