use anyhow::{Context, Result};
use nad_core::analysis::{inertia, subconcept_candidates, top_images_by_norm};
use nad_core::pool;
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::RetrieveArgs;
use crate::inputs::{dictionary, Data};
use crate::output::{num, OutDir};

#[derive(Serialize)]
struct Retrieved {
    component: String,
    ids: Vec<String>,
    norms: Vec<f64>,
    /// Of the unit-normalized embeddings of `ids`.
    inertia: f64,
}

pub fn run(a: &RetrieveArgs, out: &OutDir) -> Result<()> {
    let data = Data::load(&a.data)?;
    let store = data.store()?;
    let embeds: Vec<Array1<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| pool(data.acts.index_axis(Axis(0), i), &data.weights))
        .collect::<nad_core::Result<_>>()?;
    let index: std::collections::HashMap<&str, usize> =
        data.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let mut report = Vec::new();
    for spec in &a.components.0 {
        let samples = store.samples(spec.0)?;
        let ids = top_images_by_norm(&samples, a.top_n as usize)?;
        let rows: Vec<usize> = ids.iter().map(|id| index[id.as_str()]).collect();
        let mut m = Array2::zeros((rows.len(), data.weights.embed_dim()));
        for (r, &i) in rows.iter().enumerate() {
            m.row_mut(r).assign(&embeds[i]);
        }
        let item = Retrieved {
            component: spec.to_string(),
            norms: rows.iter().map(|&i| samples.norms[i]).collect(),
            inertia: inertia(m.view(), true)?,
            ids,
        };
        println!("{}: inertia {} over {:?}", item.component, item.inertia, item.ids);
        report.push(item);
    }
    out.json("retrieve.json", &report)?;

    if let Some(words) = &a.words {
        let dict = dictionary(words)?;
        let dirs = data.directions(&a.fit, false, Some(1))?;
        let first: Vec<_> = dirs
            .neurons
            .context("no neuron directions")?
            .into_iter()
            .map(|mut d| d.swap_remove(0))
            .collect();
        let found = subconcept_candidates(&first, &dict, a.tau)?;
        let rows: Vec<Vec<String>> = found
            .into_iter()
            .map(|c| vec![c.neuron.to_string(), c.word, num(c.similarity)])
            .collect();
        out.csv("subconcepts.csv", &["neuron", "word", "similarity"], rows)?;
    }
    Ok(())
}
