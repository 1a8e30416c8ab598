//! Synthetic bundles and a runner for the `nad` binary.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nad_core::bundle::{model_metadata, model_tensors, names, write_lines};
use nad_core::{pool, write_bundle, AttnPoolWeights, Tensor, TensorMap};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn nad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn nad")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Rounds through `f32` so in-memory values equal what a bundle stores.
fn f32_exact(a: Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v as f32 as f64)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    f32_exact(Array2::from_shape_simple_fn((rows, cols), || {
        rng.gen_range(-1.0..1.0) * scale
    }))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || (rng.gen_range(-1.0..1.0) * scale) as f32 as f64)
}

pub fn random_weights<R: Rng>(
    rng: &mut R,
    c: usize,
    heads: usize,
    d: usize,
    grid: (usize, usize),
) -> AttnPoolWeights<f64> {
    let sc = 1.0 / (c as f64).sqrt();
    AttnPoolWeights::new(
        random_matrix(rng, c, c, sc),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, c, sc),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, c, sc),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, d, sc),
        random_vector(rng, d, 0.1),
        random_matrix(rng, grid.0 * grid.1 + 1, c, 0.2),
        heads,
        grid,
    )
    .unwrap()
}

pub fn random_acts<R: Rng>(rng: &mut R, n: usize, c: usize, grid: (usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn((n, c, grid.0, grid.1), || rng.gen_range(0.0..2.0f32) as f64)
}

pub fn tensor(shape: &[usize], data: impl IntoIterator<Item = f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data.into_iter().map(|v| v as f32).collect())
}

/// Model weights, activations and any extra tensors in one bundle.
pub fn write_dataset(path: &Path, w: &AttnPoolWeights<f64>, acts: &Array4<f64>, extra: TensorMap) {
    let mut tensors = model_tensors(w);
    tensors.insert(names::ACTS.into(), Tensor::from_array(&acts.clone().into_dyn()));
    tensors.extend(extra);
    let mut meta = model_metadata(w);
    meta.insert("model".into(), "synthetic".into());
    write_bundle(&tensors, &meta, path).unwrap();
}

pub fn write_text(path: &Path, embeds: &Array2<f64>, vocab: &[String]) {
    let mut tensors = TensorMap::new();
    tensors.insert(
        names::TEXT_EMBEDS.into(),
        Tensor::from_array(&embeds.clone().into_dyn()),
    );
    write_bundle(&tensors, &BTreeMap::new(), path).unwrap();
    write_lines(path.join(names::VOCAB_FILE), vocab).unwrap();
}

pub fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Labels a set by the class its embedding is closest to, so the baseline
/// is perfect and ablations have something to lose.
fn nearest_class(w: &AttnPoolWeights<f64>, acts: &Array4<f64>, classes: &Array2<f64>) -> Vec<usize> {
    acts.axis_iter(Axis(0))
        .map(|z| {
            let e = pool(z, w).unwrap();
            let en = e.dot(&e).sqrt();
            let cos: Vec<f64> = classes
                .rows()
                .into_iter()
                .map(|t| t.dot(&e) / (t.dot(&t).sqrt() * en))
                .collect();
            (0..cos.len()).fold(0, |b, j| if cos[j] > cos[b] { j } else { b })
        })
        .collect()
}

/// Paths of a random classification / monitoring / segmentation workspace.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub model: PathBuf,
    pub classes: PathBuf,
    pub words: PathBuf,
    pub concepts: PathBuf,
    pub seg: PathBuf,
    pub weights: AttnPoolWeights<f64>,
}

impl Workspace {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub const C: usize = 8;
pub const HEADS: usize = 2;
pub const D: usize = 6;
pub const GRID: (usize, usize) = (3, 3);
pub const IMAGES: usize = 24;
pub const CLASSES: usize = 3;

pub fn workspace(seed: u64) -> Workspace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().unwrap();
    let w = random_weights(&mut rng, C, HEADS, D, GRID);

    // Weights live in their own bundle; activations reference them via --model.
    let model = dir.path().join("model");
    write_bundle(&model_tensors(&w), &model_metadata(&w), &model).unwrap();

    let classes_m = random_matrix(&mut rng, CLASSES, D, 1.0);
    let classes = dir.path().join("classes");
    write_text(&classes, &classes_m, &words("class", CLASSES));

    let acts = random_acts(&mut rng, IMAGES, C, GRID);
    let labels = nearest_class(&w, &acts, &classes_m);
    let mut extra = TensorMap::new();
    extra.insert(
        names::LABELS.into(),
        tensor(&[IMAGES], labels.iter().map(|&l| l as f64)),
    );
    extra.insert(
        "meta.group".into(),
        tensor(&[IMAGES], (0..IMAGES).map(|i| (2000 + i % 3) as f64)),
    );
    for name in ["yellow", "convertible"] {
        let flags: Vec<f64> = (0..IMAGES)
            .map(|i| if i % 2 == 0 || rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        extra.insert(format!("meta.concept.{name}"), tensor(&[IMAGES], flags));
    }
    let data = dir.path().join("data");
    let mut tensors = TensorMap::new();
    tensors.insert(names::ACTS.into(), Tensor::from_array(&acts.clone().into_dyn()));
    tensors.extend(extra);
    write_bundle(&tensors, &BTreeMap::new(), &data).unwrap();

    let words_path = dir.path().join("words");
    write_text(&words_path, &random_matrix(&mut rng, 20, D, 1.0), &words("word", 20));
    let concepts = dir.path().join("concepts");
    write_text(
        &concepts,
        &random_matrix(&mut rng, 2, D, 1.0),
        &["yellow".to_string(), "convertible".to_string()],
    );

    // 9 × 10 images cut into 6-pixel windows with stride 4: 2 × 2 windows.
    let seg = dir.path().join("seg");
    let win_acts = random_acts(&mut rng, 8, C, GRID);
    let mut extra = TensorMap::new();
    extra.insert("seg.image_size".into(), tensor(&[2, 2], [9.0, 10.0, 9.0, 10.0]));
    for i in 0..2 {
        let gt: Vec<f64> = (0..90)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    255.0
                } else {
                    rng.gen_range(0..CLASSES) as f64
                }
            })
            .collect();
        extra.insert(format!("seg.gt.{i}"), tensor(&[9, 10], gt));
    }
    write_dataset(&seg, &w, &win_acts, extra);

    Workspace {
        dir,
        data,
        model,
        classes,
        words: words_path,
        concepts,
        seg,
        weights: w,
    }
}

/// Two-class scene: class 0 fills columns `< 6` of an 8 × 12 image, class 1
/// the rest. Neuron 0 fires on class-0 patches and is read by head 0;
/// neuron 2 on class-1 patches, read by head 1. Two 8-pixel windows at
/// stride 4 on a 4 × 4 activation grid.
pub fn two_class_scene(root: &Path) -> (PathBuf, PathBuf) {
    let (c, grid, window, boundary) = (4, 4, 8, 6);
    let w = AttnPoolWeights::new(
        Array2::zeros((c, c)),
        Array1::zeros(c),
        Array2::zeros((c, c)),
        Array1::zeros(c),
        Array2::eye(c),
        Array1::zeros(c),
        Array2::eye(c),
        Array1::zeros(c),
        Array2::zeros((grid * grid + 1, c)),
        2,
        (grid, grid),
    )
    .unwrap();
    let offsets = [(0usize, 0usize), (0, 4)];
    let px = window / grid;
    let mut acts = Array4::zeros((2, c, grid, grid));
    for (wi, &(_, ox)) in offsets.iter().enumerate() {
        for ty in 0..grid {
            for tx in 0..grid {
                let ch = if ox + tx * px < boundary { 0 } else { 2 };
                acts[[wi, ch, ty, tx]] = 1.0;
            }
        }
    }
    let mut extra = TensorMap::new();
    extra.insert("seg.windows".into(), tensor(&[2, 3], [0.0, 0.0, 0.0, 0.0, 0.0, 4.0]));
    extra.insert("seg.image_size".into(), tensor(&[1, 2], [8.0, 12.0]));
    let gt = (0..8 * 12).map(|p| if p % 12 < boundary { 0.0 } else { 1.0 });
    extra.insert("seg.gt.0".into(), tensor(&[8, 12], gt));
    let data = root.join("scene");
    write_dataset(&data, &w, &acts, extra);
    let classes = root.join("scene_classes");
    write_text(
        &classes,
        &ndarray::array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        &["left".to_string(), "right".to_string()],
    );
    (data, classes)
}

/// Every file under `dir`, relative path to contents.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
