use anyhow::Result;
use nad_core::analysis::{attention_sink_profile, rank_register_neurons, register_intervention};
use ndarray::{Array1, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::RegistersArgs;
use crate::inputs::Data;
use crate::output::{num, OutDir};

#[derive(Serialize)]
struct Summary {
    images: usize,
    sink_location: &'static str,
    /// Argmax over spatial tokens of the mean profile.
    sink_token: usize,
    zeroed: Vec<usize>,
}

/// Head-averaged class attention, averaged over images in image order.
fn mean_profile(data: &Data, neurons: &[usize]) -> Result<Array1<f64>> {
    let profiles: Vec<Array1<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let z = register_intervention(data.acts.index_axis(Axis(0), i), neurons)?;
            Ok(attention_sink_profile(z.view(), &data.weights)?.profile)
        })
        .collect::<nad_core::Result<_>>()?;
    let mut acc = Array1::zeros(data.weights.spatial_tokens() + 1);
    for p in &profiles {
        acc += p;
    }
    Ok(acc / data.len() as f64)
}

pub fn run(a: &RegistersArgs, out: &OutDir) -> Result<()> {
    let data = Data::load(&a.data)?;
    let ranking = rank_register_neurons(data.acts.view(), &data.weights, a.sink)?;
    let rows: Vec<Vec<String>> = ranking
        .iter()
        .enumerate()
        .map(|(r, &(n, delta))| vec![r.to_string(), n.to_string(), num(delta)])
        .collect();
    out.csv("registers.csv", &["rank", "neuron", "delta"], rows)?;

    let zeroed: Vec<usize> = ranking.iter().take(a.top_n as usize).map(|&(n, _)| n).collect();
    let original = mean_profile(&data, &[])?;
    let intervened = mean_profile(&data, &zeroed)?;
    let rows: Vec<Vec<String>> = (0..original.len())
        .map(|i| vec![i.to_string(), num(original[i]), num(intervened[i])])
        .collect();
    out.csv("sink_profile.csv", &["token", "original", "intervened"], rows)?;

    let sink_token = (1..original.len()).fold(1, |b, i| if original[i] > original[b] { i } else { b });
    println!("sink at token {sink_token} of {}", original.len() - 1);
    out.json(
        "summary.json",
        &Summary {
            images: data.len(),
            sink_location: match a.sink {
                nad_core::analysis::SinkLocation::LastToken => "last_token",
                nad_core::analysis::SinkLocation::Argmax => "argmax",
            },
            sink_token,
            zeroed,
        },
    )
}
