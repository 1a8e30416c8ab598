//! On-disk tensor bundles.
//!
//! A bundle is a directory holding `manifest.json` and one or more raw data
//! files. Every tensor is little-endian `f32`, row-major, addressed by a
//! `(file, byte_offset)` pair in the manifest:
//!
//! ```json
//! { "version": 1,
//!   "metadata": { "model": "RN50x16", "C": "3072", "H": "48" },
//!   "tensors": [ { "name": "acts.z", "shape": [2, 3072, 12, 12],
//!                  "file": "data.bin", "byte_offset": 0 } ] }
//! ```
//!
//! Tensor data is read lazily, one entry at a time. Vocabulary lists live next
//! to the manifest as UTF-8 text files with one entry per line.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::attnpool::AttnPoolWeights;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const DATA_FILE: &str = "data.bin";
const ELEMENT_BYTES: u64 = 4;

/// Metadata keys that must parse as positive integers when present.
pub const INTEGER_METADATA_KEYS: [&str; 5] = ["C", "H", "d", "Hp", "Wp"];

pub mod names {
    pub const W_Q: &str = "attnpool.w_q";
    pub const B_Q: &str = "attnpool.b_q";
    pub const W_K: &str = "attnpool.w_k";
    pub const B_K: &str = "attnpool.b_k";
    pub const W_V: &str = "attnpool.w_v";
    pub const B_V: &str = "attnpool.b_v";
    pub const W_O: &str = "attnpool.w_o";
    pub const B_O: &str = "attnpool.b_o";
    pub const POS_EMBED: &str = "attnpool.pos_embed";
    pub const ACTS: &str = "acts.z";
    pub const LABELS: &str = "labels.y";
    pub const TEXT_EMBEDS: &str = "text.embeds";
    /// Default vocabulary file, overridable through the `vocab` metadata key.
    pub const VOCAB_FILE: &str = "vocab.txt";
    /// Optional image id sidecar, one id per line, aligned with `acts.z`.
    pub const IMAGE_IDS_FILE: &str = "image_ids.txt";
    pub const DIRS_R_HAT: &str = "dirs.r_hat";
    pub const DIRS_MEAN: &str = "dirs.mean";
    pub const DIRS_NEURON_R_HAT: &str = "dirs.neuron.r_hat";
    pub const DIRS_NEURON_MEAN: &str = "dirs.neuron.mean";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    byte_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    #[serde(default)]
    tensors: Vec<ManifestEntry>,
}

/// One tensor declared by a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: PathBuf,
    pub byte_offset: u64,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> u64 {
        self.len() as u64 * ELEMENT_BYTES
    }
}

/// A validated, immutable bundle. Tensor data stays on disk until requested.
#[derive(Debug, Clone)]
pub struct TensorBundle {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub entries: BTreeMap<String, TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

/// In-memory tensor ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    pub fn from_array<T: Scalar>(array: &ArrayD<T>) -> Self {
        Self {
            shape: array.shape().to_vec(),
            data: array.iter().map(|x| x.as_f32()).collect(),
        }
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn read_bundle(path: impl AsRef<Path>) -> Result<TensorBundle> {
    let root = path.as_ref().to_path_buf();
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::NotABundle(root));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::CorruptBundle(
            MANIFEST_FILE.into(),
            format!("unsupported manifest version {}", manifest.version),
        ));
    }

    for key in INTEGER_METADATA_KEYS {
        if let Some(raw) = manifest.metadata.get(key) {
            match raw.trim().parse::<usize>() {
                Ok(v) if v > 0 => {}
                _ => {
                    return Err(Error::CorruptBundle(
                        format!("metadata.{key}"),
                        format!("`{raw}` is not a positive integer"),
                    ))
                }
            }
        }
    }

    let mut entries = BTreeMap::new();
    let mut file_sizes: BTreeMap<String, u64> = BTreeMap::new();
    for raw in manifest.tensors {
        if let Some(dtype) = &raw.dtype {
            let d = dtype.to_ascii_lowercase();
            if d != "f32" && d != "float32" && d != "<f4" {
                return Err(Error::UnsupportedDtype(dtype.clone()));
            }
        }
        if raw.shape.is_empty() || raw.shape.contains(&0) {
            return Err(Error::CorruptBundle(
                raw.name,
                format!("shape {:?} must be a non-empty list of positive integers", raw.shape),
            ));
        }
        let size = match file_sizes.get(&raw.file) {
            Some(&s) => s,
            None => {
                let s = fs::metadata(root.join(&raw.file))
                    .map_err(|e| Error::CorruptBundle(raw.name.clone(), format!("{}: {e}", raw.file)))?
                    .len();
                file_sizes.insert(raw.file.clone(), s);
                s
            }
        };
        let entry = TensorEntry {
            name: raw.name.clone(),
            shape: raw.shape,
            file: PathBuf::from(&raw.file),
            byte_offset: raw.byte_offset,
        };
        if entry.byte_offset + entry.byte_len() > size {
            return Err(Error::CorruptBundle(
                raw.name,
                format!(
                    "needs {} bytes at offset {} but {} holds {size}",
                    entry.byte_len(),
                    entry.byte_offset,
                    raw.file
                ),
            ));
        }
        if entries.insert(raw.name.clone(), entry).is_some() {
            return Err(Error::CorruptBundle(raw.name, "duplicate tensor name".into()));
        }
    }

    Ok(TensorBundle {
        root,
        manifest_path,
        entries,
        metadata: manifest.metadata,
    })
}

/// Writes `tensors` into a single `data.bin` in name order plus the manifest.
pub fn write_bundle(tensors: &TensorMap, metadata: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    let root = path.as_ref();
    for (name, t) in tensors {
        if t.shape.is_empty() || t.shape.contains(&0) {
            return Err(Error::ArgError(format!(
                "tensor `{name}` has invalid shape {:?}",
                t.shape
            )));
        }
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::shape(name.clone(), &[n], &[t.data.len()]));
        }
    }
    fs::create_dir_all(root)?;

    let mut manifest = Manifest {
        version: FORMAT_VERSION,
        metadata: metadata.clone(),
        tensors: Vec::with_capacity(tensors.len()),
    };
    if !tensors.is_empty() {
        let mut out = BufWriter::new(File::create(root.join(DATA_FILE))?);
        let mut offset = 0u64;
        for (name, t) in tensors {
            for v in &t.data {
                out.write_all(&v.to_le_bytes())?;
            }
            manifest.tensors.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                file: DATA_FILE.into(),
                byte_offset: offset,
                dtype: None,
            });
            offset += t.data.len() as u64 * ELEMENT_BYTES;
        }
        out.flush()?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(root.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Writes a one-entry-per-line UTF-8 list.
pub fn write_lines(path: impl AsRef<Path>, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

impl TensorBundle {
    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.entry(name)?.shape)
    }

    /// Raw element values exactly as stored.
    pub fn raw(&self, name: &str) -> Result<Vec<f32>> {
        let entry = self.entry(name)?;
        let mut file = File::open(self.root.join(&entry.file))?;
        file.seek(SeekFrom::Start(entry.byte_offset))?;
        let mut bytes = vec![0u8; entry.byte_len() as usize];
        file.read_exact(&mut bytes)
            .map_err(|e| Error::CorruptBundle(name.to_string(), e.to_string()))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn raw_tensor(&self, name: &str) -> Result<Tensor> {
        Ok(Tensor::new(self.entry(name)?.shape.clone(), self.raw(name)?))
    }

    /// Loads a tensor converted to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        let shape = self.entry(name)?.shape.clone();
        let data: Vec<T> = self.raw(name)?.into_iter().map(T::from_f32_value).collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::CorruptBundle(name.to_string(), e.to_string()))
    }

    /// Loads a tensor and checks its shape.
    pub fn tensor_with_shape<T: Scalar>(&self, name: &str, expected: &[usize]) -> Result<ArrayD<T>> {
        let got = self.shape(name)?;
        if got != expected {
            return Err(Error::shape(name, expected, got));
        }
        self.tensor(name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let raw = self.meta(key).ok_or_else(|| Error::MissingMetadata(key.to_string()))?;
        raw.trim()
            .parse()
            .map_err(|_| Error::CorruptBundle(format!("metadata.{key}"), format!("`{raw}` is not an integer")))
    }

    /// Reads a sidecar text list (one entry per line) relative to the bundle root.
    pub fn read_lines(&self, file: &str) -> Result<Vec<String>> {
        let text = fs::read_to_string(self.root.join(file))?;
        Ok(text.lines().map(str::to_string).collect())
    }

    /// Vocabulary aligned with `text.embeds` rows.
    pub fn vocab(&self) -> Result<Vec<String>> {
        let file = self.meta("vocab").unwrap_or(names::VOCAB_FILE);
        self.read_lines(file)
    }

    /// Image ids from the sidecar, or `0..n` as strings when absent.
    pub fn image_ids(&self, n: usize) -> Result<Vec<String>> {
        let path = self.root.join(names::IMAGE_IDS_FILE);
        if path.is_file() {
            let ids = self.read_lines(names::IMAGE_IDS_FILE)?;
            if ids.len() != n {
                return Err(Error::CorruptBundle(
                    names::IMAGE_IDS_FILE.into(),
                    format!("{} ids for {n} images", ids.len()),
                ));
            }
            Ok(ids)
        } else {
            Ok((0..n).map(|i| i.to_string()).collect())
        }
    }

    /// Data files referenced by the manifest, in name order, deduplicated.
    pub fn data_files(&self) -> Vec<PathBuf> {
        let mut seen = HashSet::new();
        let mut files: Vec<PathBuf> = self
            .entries
            .values()
            .filter(|e| seen.insert(e.file.clone()))
            .map(|e| self.root.join(&e.file))
            .collect();
        files.sort();
        files
    }
}

/// Checks the attention-pooling tensors of a model bundle and loads them.
pub fn validate_model_bundle<T: Scalar>(bundle: &TensorBundle) -> Result<AttnPoolWeights<T>> {
    use names::*;

    let heads = bundle.meta_usize("H")?;
    let hp = bundle.meta_usize("Hp")?;
    let wp = bundle.meta_usize("Wp")?;
    let tokens = hp * wp + 1;

    let wq_shape = bundle.shape(W_Q)?;
    if wq_shape.len() != 2 || wq_shape[0] != wq_shape[1] {
        return Err(Error::shape(W_Q, &[wq_shape[0], wq_shape[0]], wq_shape));
    }
    let c = wq_shape[0];
    let wo_shape = bundle.shape(W_O)?;
    if wo_shape.len() != 2 || wo_shape[0] != c {
        return Err(Error::shape(W_O, &[c, *wo_shape.last().unwrap_or(&0)], wo_shape));
    }
    let d = wo_shape[1];
    if let Ok(meta_c) = bundle.meta_usize("C") {
        if meta_c != c {
            return Err(Error::shape(W_Q, &[meta_c, meta_c], wq_shape));
        }
    }
    if let Ok(meta_d) = bundle.meta_usize("d") {
        if meta_d != d {
            return Err(Error::shape(W_O, &[c, meta_d], wo_shape));
        }
    }
    if c % heads != 0 {
        return Err(Error::ArgError(format!("C = {c} is not divisible by H = {heads}")));
    }

    let mat = |name: &str, r: usize, k: usize| -> Result<ndarray::Array2<T>> {
        Ok(bundle
            .tensor_with_shape::<T>(name, &[r, k])?
            .into_dimensionality()
            .expect("checked shape"))
    };
    let vec = |name: &str, n: usize| -> Result<ndarray::Array1<T>> {
        Ok(bundle
            .tensor_with_shape::<T>(name, &[n])?
            .into_dimensionality()
            .expect("checked shape"))
    };

    AttnPoolWeights::new(
        mat(W_Q, c, c)?,
        vec(B_Q, c)?,
        mat(W_K, c, c)?,
        vec(B_K, c)?,
        mat(W_V, c, c)?,
        vec(B_V, c)?,
        mat(W_O, c, d)?,
        vec(B_O, d)?,
        mat(POS_EMBED, tokens, c)?,
        heads,
        (hp, wp),
    )
}

/// Tensor map holding a model's attention-pooling weights under the canonical names.
pub fn model_tensors<T: Scalar>(w: &AttnPoolWeights<T>) -> TensorMap {
    use names::*;
    let mut map = TensorMap::new();
    let mut put = |name: &str, a: ArrayD<T>| {
        map.insert(name.to_string(), Tensor::from_array(&a));
    };
    put(W_Q, w.w_q.clone().into_dyn());
    put(B_Q, w.b_q.clone().into_dyn());
    put(W_K, w.w_k.clone().into_dyn());
    put(B_K, w.b_k.clone().into_dyn());
    put(W_V, w.w_v.clone().into_dyn());
    put(B_V, w.b_v.clone().into_dyn());
    put(W_O, w.w_o.clone().into_dyn());
    put(B_O, w.b_o.clone().into_dyn());
    put(POS_EMBED, w.pos_embed.clone().into_dyn());
    map
}

/// Geometry metadata (`C`, `H`, `d`, `Hp`, `Wp`) for a model.
pub fn model_metadata<T: Scalar>(w: &AttnPoolWeights<T>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("C".into(), w.channels().to_string());
    m.insert("H".into(), w.heads.to_string());
    m.insert("d".into(), w.embed_dim().to_string());
    m.insert("Hp".into(), w.grid.0.to_string());
    m.insert("Wp".into(), w.grid.1.to_string());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, shape: Vec<usize>, data: Vec<f32>) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(name.into(), Tensor::new(shape, data));
        m
    }

    #[test]
    fn minimal_bundle_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        write_bundle(&one("z", vec![4, 2, 2], data.clone()), &BTreeMap::new(), dir.path()).unwrap();
        let b = read_bundle(dir.path()).unwrap();
        assert_eq!(b.entries.len(), 1);
        assert_eq!(b.entry("z").unwrap().byte_len(), 64);
        assert_eq!(b.raw("z").unwrap(), data);
    }

    #[test]
    fn identity_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        write_bundle(&one("eye", vec![2, 2], eye.clone()), &BTreeMap::new(), dir.path()).unwrap();
        let b = read_bundle(dir.path()).unwrap();
        let t: ArrayD<f64> = b.tensor("eye").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(b.raw("eye").unwrap(), eye);
    }

    #[test]
    fn empty_map_is_a_valid_bundle() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&TensorMap::new(), &BTreeMap::new(), dir.path()).unwrap();
        let b = read_bundle(dir.path()).unwrap();
        assert!(b.entries.is_empty());
    }

    #[test]
    fn missing_manifest_is_not_a_bundle() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::NotABundle(_))));
    }

    #[test]
    fn short_data_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("z.bin"), [0u8; 8]).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"version":1,"metadata":{},"tensors":[{"name":"z","shape":[3],"file":"z.bin","byte_offset":0}]}"#,
        )
        .unwrap();
        match read_bundle(dir.path()) {
            Err(Error::CorruptBundle(name, _)) => assert_eq!(name, "z"),
            other => panic!("expected CorruptBundle, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("z.bin"), [0u8; 8]).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"version":1,"tensors":[{"name":"z","shape":[1],"file":"z.bin","byte_offset":0,"dtype":"f16"}]}"#,
        )
        .unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn bad_metadata_integer_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("H".to_string(), "0".to_string());
        write_bundle(&TensorMap::new(), &meta, dir.path()).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::CorruptBundle(..))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("z.bin"), [0u8; 8]).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"version":1,"tensors":[{"name":"z","shape":[1],"file":"z.bin","byte_offset":0},{"name":"z","shape":[1],"file":"z.bin","byte_offset":4}]}"#,
        )
        .unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::CorruptBundle(..))));
    }

    #[test]
    fn write_rejects_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_bundle(&one("z", vec![3], vec![1.0]), &BTreeMap::new(), dir.path());
        assert!(matches!(r, Err(Error::ShapeError { .. })));
    }

    #[test]
    fn manifest_order_does_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("a.bin"), bytes).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"version":1,"tensors":[{"name":"y","shape":[1],"file":"a.bin","byte_offset":8},{"name":"x","shape":[2],"file":"a.bin","byte_offset":0}]}"#,
        )
        .unwrap();
        let b = read_bundle(dir.path()).unwrap();
        assert_eq!(b.raw("x").unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.raw("y").unwrap(), vec![3.0]);
    }
}
