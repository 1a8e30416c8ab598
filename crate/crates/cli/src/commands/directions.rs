use anyhow::Result;
use nad_core::bundle::model_metadata;
use nad_core::DirectionSet;
use serde::Serialize;

use crate::args::{DirectionsArgs, FitArgs};
use crate::inputs::Data;
use crate::output::OutDir;

#[derive(Serialize)]
struct Summary {
    images: usize,
    top_m: usize,
    rank: usize,
    pairs: usize,
    degenerate_pairs: usize,
    neurons: usize,
    degenerate_neurons: usize,
}

pub fn run(a: &DirectionsArgs, out: &OutDir) -> Result<()> {
    let data = Data::load(&a.data)?;
    let fit = FitArgs {
        dirs: None,
        top_m: a.top_m,
    };
    let rank = a.rank as usize;
    let set: DirectionSet<f64> = data.directions(&fit, true, Some(rank))?;
    let pairs = set.pairs.as_deref().unwrap_or_default();
    let neurons = set.neurons.as_deref().unwrap_or_default();
    let summary = Summary {
        images: data.len(),
        top_m: (a.top_m as usize).min(data.len()),
        rank,
        pairs: pairs.len(),
        degenerate_pairs: pairs.iter().filter(|d| d.degenerate).count(),
        neurons: neurons.len(),
        degenerate_neurons: neurons.iter().filter(|d| d.iter().any(|x| x.degenerate)).count(),
    };
    let mut meta = model_metadata(&data.weights);
    meta.insert("top_m".into(), summary.top_m.to_string());
    meta.insert("rank".into(), rank.to_string());
    set.write(out.path("dirs"), meta)?;
    log::info!("wrote {}", out.path("dirs").display());
    out.json("summary.json", &summary)?;
    Ok(())
}
