//! Loading of bundles into `f64` working arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nad_core::bundle::names;
use nad_core::sparse_text::TextDictionary;
use nad_core::zeroshot::{ClassBank, DEFAULT_TEMPLATE};
use nad_core::{read_bundle, validate_model_bundle, AttnPoolWeights, ContributionStore, DirectionSet, TensorBundle};
use ndarray::{Array2, Array4, Ix2, Ix3, Ix4};
use sha2::{Digest, Sha256};

use crate::args::{DataArgs, FitArgs, TemplateArgs};

pub fn open(path: &Path) -> Result<TensorBundle> {
    read_bundle(path).with_context(|| format!("opening bundle {}", path.display()))
}

/// Activations, model and image ids of one data set.
pub struct Data {
    pub bundle: TensorBundle,
    pub weights: AttnPoolWeights<f64>,
    /// `N × C × Hp × Wp`
    pub acts: Array4<f64>,
    pub ids: Vec<String>,
}

impl Data {
    pub fn load(args: &DataArgs) -> Result<Self> {
        let bundle = open(&args.bundle)?;
        let weights = match &args.model {
            Some(m) => validate_model_bundle(&open(m)?),
            None => validate_model_bundle(&bundle),
        }
        .context("loading attention-pooling weights")?;
        let acts: Array4<f64> = bundle
            .tensor(names::ACTS)?
            .into_dimensionality::<Ix4>()
            .with_context(|| format!("`{}` must be N × C × Hp × Wp", names::ACTS))?;
        let (c, (hp, wp)) = (weights.channels(), weights.grid);
        if acts.shape()[1..] != [c, hp, wp] {
            bail!(
                "`{}` has shape {:?}, the model expects N × {c} × {hp} × {wp}",
                names::ACTS,
                acts.shape()
            );
        }
        let ids = bundle.image_ids(acts.shape()[0])?;
        log::info!(
            "{} images, C={c} H={} d={} grid {hp}×{wp}",
            acts.shape()[0],
            weights.heads,
            weights.embed_dim()
        );
        Ok(Self {
            bundle,
            weights,
            acts,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.acts.shape()[0]
    }

    /// Integer labels from `labels.y`.
    pub fn labels(&self) -> Result<Vec<usize>> {
        let y = self.bundle.raw(names::LABELS)?;
        if y.len() != self.len() {
            bail!("{} labels for {} images", y.len(), self.len());
        }
        y.iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    bail!("label {v} is not a non-negative integer")
                }
            })
            .collect()
    }

    pub fn store(&self) -> Result<ContributionStore<'_, f64>> {
        Ok(ContributionStore::collect(
            self.acts.view(),
            &self.weights,
            self.ids.clone(),
        )?)
    }

    /// Directions from `--dirs`, or the requested ones fitted on this data set.
    pub fn directions(&self, fit: &FitArgs, pairs: bool, neuron_rank: Option<usize>) -> Result<DirectionSet<f64>> {
        if let Some(path) = &fit.dirs {
            let set = DirectionSet::from_bundle(&open(path)?)?;
            if set.heads != self.weights.heads {
                bail!(
                    "direction bundle has H={}, model has H={}",
                    set.heads,
                    self.weights.heads
                );
            }
            return Ok(set);
        }
        let top_m = (fit.top_m as usize).min(self.len());
        if top_m < fit.top_m as usize {
            log::warn!("top-m {} exceeds {} images; using {top_m}", fit.top_m, self.len());
        }
        log::info!("fitting directions from {} images (top {top_m})", self.len());
        let store = self.store()?;
        let neurons = match neuron_rank {
            Some(r) => Some(store.fit_neuron_directions(top_m, r)?),
            None => None,
        };
        let pairs = if pairs {
            Some(store.fit_pair_directions(top_m)?)
        } else {
            None
        };
        Ok(DirectionSet {
            heads: self.weights.heads,
            pairs,
            neurons,
        })
    }
}

/// `text.embeds` rows with their vocabulary.
pub fn text_rows(bundle: &TensorBundle) -> Result<(ndarray::ArrayD<f64>, Vec<String>)> {
    let embeds = bundle.tensor::<f64>(names::TEXT_EMBEDS)?;
    let vocab = bundle.vocab().context("reading vocabulary")?;
    let rows = embeds.shape()[embeds.ndim().saturating_sub(2)];
    if embeds.ndim() < 2 || rows != vocab.len() {
        bail!(
            "`{}` of shape {:?} does not match {} vocabulary entries",
            names::TEXT_EMBEDS,
            embeds.shape(),
            vocab.len()
        );
    }
    Ok((embeds, vocab))
}

pub fn class_bank(path: &Path, t: &TemplateArgs) -> Result<ClassBank<f64>> {
    let bundle = open(path)?;
    let (embeds, names) = text_rows(&bundle)?;
    let template = bundle.meta("template").unwrap_or(DEFAULT_TEMPLATE).to_string();
    let bank = match embeds.ndim() {
        2 => ClassBank::new(embeds.into_dimensionality::<Ix2>()?, names, template)?,
        3 if t.multi_template => {
            let stack = embeds.into_dimensionality::<Ix3>()?;
            let per: Vec<Array2<f64>> = stack.outer_iter().map(|m| m.to_owned()).collect();
            ClassBank::from_templates(&per, names, template)?
        }
        3 => bail!("class bundle holds one embedding set per template; pass --multi-template to average them"),
        n => bail!("`{}` must have 2 or 3 axes, found {n}", names::TEXT_EMBEDS),
    };
    Ok(bank)
}

pub fn dictionary(path: &Path) -> Result<TextDictionary<f64>> {
    let bundle = open(path)?;
    let (embeds, vocab) = text_rows(&bundle)?;
    let atoms = embeds
        .into_dimensionality::<Ix2>()
        .context("word embeddings must be V × d")?;
    Ok(TextDictionary::normalized(atoms, vocab)?)
}

/// One-axis tensor as integers.
pub fn integer_tensor(bundle: &TensorBundle, name: &str) -> Result<Vec<usize>> {
    bundle
        .raw(name)?
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                bail!("`{name}` holds {v}, expected a non-negative integer")
            }
        })
        .collect()
}

/// Window activations as `C × Hp × Wp` views grouped per image.
pub fn per_image<'a>(acts: &'a Array4<f64>, owners: &[usize], images: usize) -> Vec<Vec<ndarray::ArrayView3<'a, f64>>> {
    let mut groups = vec![Vec::new(); images];
    for (w, &img) in owners.iter().enumerate() {
        groups[img].push(acts.index_axis(ndarray::Axis(0), w));
    }
    groups
}

/// SHA-256 of every regular file under `path` (or of `path` itself),
/// keyed by `path/relative`.
pub fn checksums(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut files: Vec<PathBuf> = Vec::new();
    if path.is_dir() {
        collect_files(path, &mut files)?;
    } else {
        files.push(path.to_path_buf());
    }
    files.sort();
    for f in files {
        let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        let key = match f.strip_prefix(path) {
            Ok(rel) if !rel.as_os_str().is_empty() => format!("{}/{}", path.display(), rel.display()),
            _ => path.display().to_string(),
        };
        out.insert(key, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

fn collect_files(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, files)?;
        } else if p.is_file() {
            files.push(p);
        }
    }
    Ok(())
}
