use anyhow::Result;
use nad_core::directions::ReconstructionMode;
use nad_core::zeroshot::{accuracy, reconstructed_embeddings, AccuracyReport};
use nad_core::DirectionSet;

use crate::args::ClassifyArgs;
use crate::inputs::{class_bank, Data};
use crate::output::OutDir;

pub fn run(a: &ClassifyArgs, out: &OutDir) -> Result<()> {
    let data = Data::load(&a.data)?;
    let labels = data.labels()?;
    let bank = class_bank(&a.classes, &a.templates)?;
    let dirs = match a.mode {
        ReconstructionMode::Baseline => DirectionSet {
            heads: data.weights.heads,
            pairs: None,
            neurons: None,
        },
        ReconstructionMode::PairRank1 => data.directions(&a.fit, true, None)?,
        ReconstructionMode::NeuronRank(k) => data.directions(&a.fit, false, Some(k))?,
    };
    let embeds = reconstructed_embeddings(data.acts.view(), &data.weights, a.mode, &dirs, None)?;
    let report = AccuracyReport {
        mode: a.mode.to_string(),
        n: data.len(),
        accuracy: accuracy(embeds.view(), &labels, &bank)?,
    };
    println!("{}: accuracy {} over {} images", report.mode, report.accuracy, report.n);
    out.json("classify.json", &report)
}
