mod ablate;
mod classify;
mod decompose;
mod directions;
mod monitor;
mod omp;
mod registers;
mod retrieve;
mod segment;
mod validate;

use std::collections::BTreeMap;

use anyhow::Result;

use crate::args::{self, Cli, Command};
use crate::inputs::checksums;
use crate::output::{write_run_record, OutDir};

pub fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    let out = args::out_dir(cmd).map(|p| OutDir::create(p)).transpose()?;
    if let Some(out) = &out {
        let mut inputs = BTreeMap::new();
        for (flag, path) in args::input_paths(cmd) {
            inputs.insert(flag.to_string(), checksums(&path)?);
        }
        if let Some(cfg) = &cli.config {
            inputs.insert("config".into(), checksums(cfg)?);
        }
        write_run_record(out, &serde_json::to_value(cmd)?, inputs)?;
    }
    match cmd {
        Command::Validate(a) => validate::run(a),
        Command::Decompose(a) => decompose::run(a, out.as_ref()),
        Command::Directions(a) => directions::run(a, &out.expect("output directory")),
        Command::Ablate(a) => ablate::run(a, &out.expect("output directory")),
        Command::Omp(a) => omp::run(a, &out.expect("output directory")),
        Command::Classify(a) => classify::run(a, &out.expect("output directory")),
        Command::Segment(a) => segment::run(a, &out.expect("output directory")),
        Command::Monitor(a) => monitor::run(a, &out.expect("output directory")),
        Command::Registers(a) => registers::run(a, &out.expect("output directory")),
        Command::Retrieve(a) => retrieve::run(a, &out.expect("output directory")),
    }
}

/// `pair:<n>:<h>` / `neuron:<n>` labels used across reports.
pub(crate) fn pair_label(neuron: usize, head: usize) -> String {
    format!("pair:{neuron}:{head}")
}

pub(crate) fn neuron_label(neuron: usize) -> String {
    format!("neuron:{neuron}")
}
