use anyhow::{bail, Result};
use nad_core::ablation::{ablation_curve, channel_means, rank_components, AblationEvaluator, ComponentKind};
use nad_core::pool;
use nad_core::zeroshot::accuracy;
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use super::{neuron_label, pair_label};
use crate::args::AblateArgs;
use crate::inputs::{class_bank, Data};
use crate::output::{num, OutDir};

#[derive(Serialize)]
struct Summary {
    images: usize,
    percentile: f64,
    baseline_accuracy: f64,
}

pub fn run(a: &AblateArgs, out: &OutDir) -> Result<()> {
    if let Some(f) = a.fractions.0.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        bail!("fraction {f} is outside (0, 1]");
    }
    let data = Data::load(&a.data)?;
    let labels = data.labels()?;
    let bank = class_bank(&a.classes, &a.templates)?;
    let w = &data.weights;
    let store = data.store()?;
    let dataset = a.data.bundle.display().to_string();

    let embeds: Vec<_> = (0..data.len())
        .into_par_iter()
        .map(|i| pool(data.acts.index_axis(Axis(0), i), w))
        .collect::<nad_core::Result<_>>()?;
    let mut base = Array2::zeros((data.len(), w.embed_dim()));
    for (i, e) in embeds.iter().enumerate() {
        base.row_mut(i).assign(e);
    }
    let baseline = accuracy(base.view(), &labels, &bank)?;
    log::info!("baseline accuracy {baseline}");

    let eval = AblationEvaluator {
        weights: w,
        activations: data.acts.view(),
        labels: &labels,
        bank: &bank,
    };
    let mut curve_rows = Vec::new();
    let mut rank_rows = Vec::new();
    for &kind in &a.kinds.0 {
        // Activations are ranked like neurons, by contribution norm, so the
        // two curves differ only in how the rest is ablated.
        let (norms, means) = match kind {
            ComponentKind::Pair => (store.pair_norms(), store.pair_means()),
            ComponentKind::Neuron => (store.neuron_norms(), store.neuron_means()),
            ComponentKind::NeuronActivation => {
                let m = channel_means(data.acts.view());
                (store.neuron_norms(), m.insert_axis(Axis(0)))
            }
        };
        let ranking = rank_components(&norms, a.percentile, kind, &dataset)?;
        for (r, (&key, &score)) in ranking.keys.iter().zip(&ranking.scores).enumerate() {
            let label = match kind {
                ComponentKind::Pair => {
                    let (n, h) = w.pair_of(key);
                    pair_label(n, h)
                }
                _ => neuron_label(key),
            };
            rank_rows.push(vec![kind.to_string(), r.to_string(), label, num(score)]);
        }
        let curve = ablation_curve(&ranking, &a.fractions.0, |keep| eval.accuracy(kind, keep, means.view()))?;
        for p in curve {
            log::info!("{kind} keep {}: accuracy {}", p.fraction, p.accuracy);
            curve_rows.push(vec![num(p.fraction), kind.to_string(), num(p.accuracy)]);
        }
    }
    out.csv("ablation.csv", &["fraction", "kind", "accuracy"], curve_rows)?;
    out.csv("ranking.csv", &["kind", "rank", "component", "score"], rank_rows)?;
    out.json(
        "summary.json",
        &Summary {
            images: data.len(),
            percentile: a.percentile,
            baseline_accuracy: baseline,
        },
    )
}
