use anyhow::{Context, Result};
use nad_core::bundle::names;
use nad_core::validate_model_bundle;

use crate::args::ValidateArgs;
use crate::inputs::{open, text_rows};

pub fn run(a: &ValidateArgs) -> Result<()> {
    let bundle = open(&a.path)?;
    println!("bundle {}", a.path.display());
    println!("metadata:");
    for (k, v) in &bundle.metadata {
        println!("  {k} = {v}");
    }
    println!("tensors:");
    for (name, e) in &bundle.entries {
        println!("  {name} {:?} {}@{}", e.shape, e.file.display(), e.byte_offset);
    }
    if bundle.contains(names::W_Q) {
        let w = validate_model_bundle::<f32>(&bundle).context("attention-pooling weights")?;
        println!(
            "model: C={} H={} d={} d_h={} grid={}x{} pairs={}",
            w.channels(),
            w.heads,
            w.embed_dim(),
            w.head_dim(),
            w.grid.0,
            w.grid.1,
            w.pair_count()
        );
    }
    if bundle.contains(names::TEXT_EMBEDS) {
        let (embeds, vocab) = text_rows(&bundle)?;
        println!("text: {} entries of shape {:?}", vocab.len(), embeds.shape());
    }
    println!("ok");
    Ok(())
}
