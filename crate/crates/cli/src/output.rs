use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text).with_context(|| format!("writing {name}"))?;
        log::info!("wrote {}", self.path(name).display());
        Ok(())
    }

    /// CSV with the given header; every row must have as many fields.
    pub fn csv<R, I>(&self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let mut w = csv::Writer::from_path(self.path(name)).with_context(|| format!("writing {name}"))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        log::info!("wrote {}", self.path(name).display());
        Ok(())
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a Value,
    inputs: BTreeMap<String, BTreeMap<String, String>>,
}

/// `run.json`: the resolved configuration and a checksum of every input
/// file. The thread count and output path are left out so that reruns
/// compare byte for byte.
pub fn write_run_record(
    out: &OutDir,
    config: &Value,
    inputs: BTreeMap<String, BTreeMap<String, String>>,
) -> Result<()> {
    out.json(
        "run.json",
        &RunRecord {
            tool: "nad",
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs,
        },
    )
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}
