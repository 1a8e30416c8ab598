use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use nad_core::analysis::{concept_ratios, distribution_shift_series};
use nad_core::segmentation::select_topk_pairs;
use ndarray::Ix2;
use serde::Serialize;

use super::pair_label;
use crate::args::MonitorArgs;
use crate::inputs::{integer_tensor, open, text_rows, Data};
use crate::output::{num, OutDir};

pub const GROUP: &str = "meta.group";

fn concept_tensor(name: &str) -> String {
    format!("meta.concept.{name}")
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct GroupReport {
    group: String,
    n: usize,
    point_biserial: Option<f64>,
}

#[derive(Serialize)]
struct ConceptReport {
    pairs: Vec<String>,
    correlation: Option<f64>,
    applicable_groups: usize,
    groups: Vec<GroupReport>,
    warnings: Vec<String>,
}

pub fn run(a: &MonitorArgs, out: &OutDir) -> Result<()> {
    let data = Data::load(&a.data)?;
    let concepts = open(&a.concepts)?;
    let (embeds, names) = text_rows(&concepts)?;
    let embeds = embeds
        .into_dimensionality::<Ix2>()
        .context("concept embeddings must be V × d")?;
    let group_of = integer_tensor(&data.bundle, GROUP)?;
    if group_of.len() != data.len() {
        bail!("`{GROUP}` has {} entries for {} images", group_of.len(), data.len());
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, g) in group_of.iter().enumerate() {
        groups.entry(g.to_string()).or_default().push(i);
    }

    let dirs = data.directions(&a.fit, true, None)?;
    let pair_dirs = dirs.pairs.as_deref().context("no pair directions")?;
    let mut report = BTreeMap::new();
    for (j, name) in names.iter().enumerate() {
        let flags: Vec<bool> = data
            .bundle
            .raw(&concept_tensor(name))
            .with_context(|| format!("labels for concept `{name}`"))?
            .iter()
            .map(|&v| v != 0.0)
            .collect();
        let pairs = select_topk_pairs(pair_dirs, data.weights.heads, embeds.row(j), a.k as usize)?;
        let ratios = concept_ratios(data.acts.view(), &data.weights, &pairs)?;
        let series = distribution_shift_series(name, &groups, &flags, &ratios)?;
        for w in &series.warnings {
            log::warn!("{w}");
        }
        let rows: Vec<Vec<String>> = series
            .groups
            .iter()
            .map(|g| vec![g.group.clone(), num(g.gt_proportion), num(g.mean_ratio)])
            .collect();
        out.csv(
            &format!("series.{}.csv", file_stem(name)),
            &["group", "gt_proportion", "mean_ratio"],
            rows,
        )?;
        match series.correlation {
            Some(r) => println!("{name}: point-biserial {r} over {} groups", series.applicable_groups),
            None => println!("{name}: no applicable groups"),
        }
        report.insert(
            name.clone(),
            ConceptReport {
                pairs: pairs.iter().map(|&(n, h)| pair_label(n, h)).collect(),
                correlation: series.correlation,
                applicable_groups: series.applicable_groups,
                groups: series
                    .groups
                    .iter()
                    .map(|g| GroupReport {
                        group: g.group.clone(),
                        n: g.n,
                        point_biserial: g.point_biserial,
                    })
                    .collect(),
                warnings: series.warnings,
            },
        );
    }
    out.json("correlation.json", &report)
}
