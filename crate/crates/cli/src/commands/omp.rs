use anyhow::{bail, Context, Result};
use nad_core::directions::ReconstructionMode;
use nad_core::sparse_text::{omp_batch, sparse_reconstruction_curve, top_words};
use nad_core::zeroshot::{accuracy, reconstructed_embeddings};
use nad_core::{ComponentKey, Direction, DirectionSet};
use ndarray::Array2;
use serde::Serialize;

use super::{neuron_label, pair_label};
use crate::args::{DataArgs, DirectionKind, OmpArgs};
use crate::inputs::{class_bank, dictionary, open, Data};
use crate::output::{num, OutDir};

#[derive(Serialize)]
struct CurveSummary {
    component: String,
    images: usize,
    full_direction_accuracy: f64,
}

fn label(dir: &Direction<f64>) -> String {
    match dir.key {
        ComponentKey::Pair { neuron, head } => pair_label(neuron, head),
        ComponentKey::Neuron(n) => neuron_label(n),
        ComponentKey::Head(h) => format!("head:{h}"),
    }
}

pub fn run(a: &OmpArgs, out: &OutDir) -> Result<()> {
    let set: DirectionSet<f64> = DirectionSet::from_bundle(&open(&a.dirs)?)?;
    let dirs: Vec<Direction<f64>> = match a.component {
        DirectionKind::Pair => set.pairs.clone().context("direction bundle has no pair directions")?,
        DirectionKind::Neuron => set
            .neurons
            .as_ref()
            .context("direction bundle has no neuron directions")?
            .iter()
            .map(|d| d[0].clone())
            .collect(),
    };
    let dict = dictionary(&a.words)?;
    if dirs.first().is_some_and(|d| d.r_hat.len() != dict.dim()) {
        bail!(
            "directions live in {} dimensions, words in {}",
            dirs[0].r_hat.len(),
            dict.dim()
        );
    }
    log::info!(
        "coding {} {} directions with m = {} over {} words",
        dirs.len(),
        a.component,
        a.m,
        dict.len()
    );

    let mut targets = Array2::zeros((dirs.len(), dict.dim()));
    for (i, d) in dirs.iter().enumerate() {
        targets.row_mut(i).assign(&d.r_hat);
    }
    let codes = omp_batch(targets.view(), &dict, a.m as usize)?;
    let mut rows = Vec::new();
    let mut residuals = Vec::new();
    for (dir, code) in dirs.iter().zip(&codes) {
        let name = label(dir);
        for w in &code.warnings {
            log::warn!("{name}: {w}");
        }
        for (word, coef) in top_words(code, &dict) {
            rows.push(vec![name.clone(), word, num(coef)]);
        }
        residuals.push(vec![name, num(code.residual_norm)]);
    }
    out.csv("sparse.csv", &["component", "word", "coefficient"], rows)?;
    out.csv("residuals.csv", &["component", "residual_norm"], residuals)?;

    if let (Some(bundle), Some(classes), Some(m_values)) = (&a.bundle, &a.classes, &a.curve_m) {
        let data = Data::load(&DataArgs {
            bundle: bundle.clone(),
            model: a.model.clone(),
        })?;
        let labels = data.labels()?;
        let bank = class_bank(classes, &a.templates)?;
        let mode = match a.component {
            DirectionKind::Pair => ReconstructionMode::PairRank1,
            DirectionKind::Neuron => ReconstructionMode::NeuronRank(1),
        };
        let evaluate = |axes: Option<&[ndarray::Array1<f64>]>| -> nad_core::Result<f64> {
            let e = reconstructed_embeddings(data.acts.view(), &data.weights, mode, &set, axes)?;
            accuracy(e.view(), &labels, &bank)
        };
        let full = evaluate(None)?;
        let curve = sparse_reconstruction_curve(&dirs, &dict, &m_values.0, |_, axes| evaluate(Some(axes)))?;
        let rows: Vec<Vec<String>> = curve.iter().map(|p| vec![p.m.to_string(), num(p.accuracy)]).collect();
        out.csv("sparse_curve.csv", &["m", "accuracy"], rows)?;
        out.json(
            "curve_summary.json",
            &CurveSummary {
                component: a.component.to_string(),
                images: data.len(),
                full_direction_accuracy: full,
            },
        )?;
    }
    Ok(())
}
