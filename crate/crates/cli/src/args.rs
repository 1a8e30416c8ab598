use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nad_core::ablation::{ComponentKind, DEFAULT_PERCENTILE};
use nad_core::analysis::{SinkLocation, DEFAULT_CONCEPT_K, DEFAULT_TAU, DEFAULT_TOP_N};
use nad_core::attnpool::DecompositionLevel;
use nad_core::directions::ReconstructionMode;
use nad_core::segmentation::{HeatmapVariant, DEFAULT_K, DEFAULT_STRIDE, DEFAULT_WINDOW};
use serde::{Serialize, Serializer};

/// Comma-separated list taken as one flag value, so a later occurrence
/// replaces an earlier one instead of appending to it.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .and_then(|v| {
                if v.is_empty() {
                    Err("empty list".into())
                } else {
                    Ok(List(v))
                }
            })
    }
}

impl<T: fmt::Display> Serialize for List<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|v| v.to_string()))
    }
}

fn as_str<V: fmt::Display, S: Serializer>(v: &V, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "nad",
    version,
    about = "Neuron-attention decomposition of CLIP-ResNet attention pooling"
)]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    /// JSON file whose keys supply any subcommand flag; the command line wins.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Check a bundle and print its metadata.
    Validate(ValidateArgs),
    /// Decompose every image of an activation bundle at one level.
    Decompose(DecomposeArgs),
    /// Fit pair and neuron directions.
    Directions(DirectionsArgs),
    /// Mean-ablation accuracy curves.
    Ablate(AblateArgs),
    /// Sparse text decomposition of fitted directions.
    Omp(OmpArgs),
    /// Zero-shot accuracy of (reconstructed) embeddings.
    Classify(ClassifyArgs),
    /// Training-free segmentation with slide inference.
    Segment(SegmentArgs),
    /// Concept contribution ratios across dataset groups.
    Monitor(MonitorArgs),
    /// Attention sink profile and register neuron ranking.
    Registers(RegistersArgs),
    /// Top images by contribution norm and their inertia.
    Retrieve(RetrieveArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Decompose(_) => "decompose",
            Command::Directions(_) => "directions",
            Command::Ablate(_) => "ablate",
            Command::Omp(_) => "omp",
            Command::Classify(_) => "classify",
            Command::Segment(_) => "segment",
            Command::Monitor(_) => "monitor",
            Command::Registers(_) => "registers",
            Command::Retrieve(_) => "retrieve",
        }
    }
}

pub const SUBCOMMANDS: [&str; 10] = [
    "validate",
    "decompose",
    "directions",
    "ablate",
    "omp",
    "classify",
    "segment",
    "monitor",
    "registers",
    "retrieve",
];

/// Activation bundle plus the model it came from.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Bundle holding `acts.z` (and `labels.y`, `meta.*` where needed).
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    /// Bundle with the attention-pooling weights; defaults to `--bundle`.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
}

/// Where directions come from when they are needed.
#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// Precomputed direction bundle; fitted from `--bundle` when absent.
    #[arg(long, value_name = "DIR")]
    pub dirs: Option<PathBuf>,
    /// Samples per component used for the principal directions.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub top_m: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecomposeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "neuron_head")]
    #[serde(serialize_with = "as_str")]
    pub level: DecompositionLevel,
    /// Fail unless every image reconstructs the forward output.
    #[arg(long)]
    pub check: bool,
    /// Relative tolerance for `--check`.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Write `decomp.<level>` into this directory.
    #[arg(long, value_name = "DIR")]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DirectionsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub top_m: u64,
    /// Neuron directions per neuron.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub rank: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Class bundle (`text.embeds` + vocabulary).
    #[arg(long, value_name = "DIR")]
    pub classes: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub templates: TemplateArgs,
    #[arg(long, default_value = "pair,neuron,activation")]
    pub kinds: List<ComponentKind>,
    /// Scores are means of the top `percentile`% norms.
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    pub percentile: f64,
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub fractions: List<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TemplateArgs {
    /// Average a `T × J × d` class tensor over templates.
    #[arg(long)]
    pub multi_template: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Pair,
    Neuron,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OmpArgs {
    /// Direction bundle.
    #[arg(long, value_name = "DIR")]
    pub dirs: PathBuf,
    /// Word bundle (`text.embeds` + vocabulary).
    #[arg(long, value_name = "DIR")]
    pub words: PathBuf,
    /// Atoms per code.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub m: u64,
    #[arg(long, value_enum, default_value = "pair")]
    pub component: DirectionKind,
    /// Activation bundle for the accuracy-versus-m curve.
    #[arg(long, value_name = "DIR", requires_all = ["classes", "curve_m"])]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub classes: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub templates: TemplateArgs,
    /// Sparsity levels for the curve.
    #[arg(long)]
    pub curve_m: Option<List<usize>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClassifyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub classes: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub templates: TemplateArgs,
    /// baseline, pair_rank1 or neuron_rank_<k>.
    #[arg(long, default_value = "baseline")]
    #[serde(serialize_with = "as_str")]
    pub mode: ReconstructionMode,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SegmentArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub classes: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub templates: TemplateArgs,
    /// Pairs per class.
    #[arg(long, default_value_t = DEFAULT_K as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// Window side in pixels.
    #[arg(long, default_value_t = DEFAULT_WINDOW as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub window: u64,
    #[arg(long, default_value_t = DEFAULT_STRIDE as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub stride: u64,
    #[arg(long, default_value = "combined")]
    #[serde(serialize_with = "as_str")]
    pub variant: HeatmapVariant,
    /// Zero these channels before segmenting.
    #[arg(long)]
    pub register_neurons: Option<List<usize>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MonitorArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Concept bundle; vocabulary entries name the `meta.concept.<name>` labels.
    #[arg(long, value_name = "DIR")]
    pub concepts: PathBuf,
    /// Pairs per concept.
    #[arg(long, default_value_t = DEFAULT_CONCEPT_K as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegistersArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// last_token or argmax.
    #[arg(long, default_value = "last_token")]
    #[serde(serialize_with = "as_sink")]
    pub sink: SinkLocation,
    /// Neurons zeroed for the intervened profile.
    #[arg(long, default_value_t = DEFAULT_TOP_N as u64)]
    pub top_n: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

fn as_sink<S: Serializer>(v: &SinkLocation, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match v {
        SinkLocation::LastToken => "last_token",
        SinkLocation::Argmax => "argmax",
    })
}

/// `pair:<n>:<h>`, `neuron:<n>` or `head:<h>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentSpec(pub nad_core::ComponentKey);

impl FromStr for ComponentSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        use nad_core::ComponentKey;
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|e| format!("`{p}` in `{s}`: {e}"));
        match parts.as_slice() {
            ["pair", n, h] => Ok(Self(ComponentKey::Pair {
                neuron: num(n)?,
                head: num(h)?,
            })),
            ["neuron", n] => Ok(Self(ComponentKey::Neuron(num(n)?))),
            ["head", h] => Ok(Self(ComponentKey::Head(num(h)?))),
            _ => Err(format!("expected pair:<n>:<h>, neuron:<n> or head:<h>, got `{s}`")),
        }
    }
}

impl fmt::Display for ComponentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use nad_core::ComponentKey;
        match self.0 {
            ComponentKey::Pair { neuron, head } => write!(f, "pair:{neuron}:{head}"),
            ComponentKey::Neuron(n) => write!(f, "neuron:{n}"),
            ComponentKey::Head(h) => write!(f, "head:{h}"),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RetrieveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub components: List<ComponentSpec>,
    #[arg(long, default_value_t = DEFAULT_TOP_N as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub top_n: u64,
    /// Word bundle; also lists neurons whose first direction matches a word.
    #[arg(long, value_name = "DIR")]
    pub words: Option<PathBuf>,
    /// Cosine threshold for those matches.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

/// Flags naming input paths, for existence checks and checksums.
pub fn input_paths(cmd: &Command) -> Vec<(&'static str, PathBuf)> {
    let mut v: Vec<(&'static str, PathBuf)> = Vec::new();
    let data = |v: &mut Vec<(&'static str, PathBuf)>, d: &DataArgs| {
        v.push(("bundle", d.bundle.clone()));
        if let Some(m) = &d.model {
            v.push(("model", m.clone()));
        }
    };
    let fit = |v: &mut Vec<(&'static str, PathBuf)>, f: &FitArgs| {
        if let Some(d) = &f.dirs {
            v.push(("dirs", d.clone()));
        }
    };
    match cmd {
        Command::Validate(a) => v.push(("path", a.path.clone())),
        Command::Decompose(a) => data(&mut v, &a.data),
        Command::Directions(a) => data(&mut v, &a.data),
        Command::Ablate(a) => {
            data(&mut v, &a.data);
            v.push(("classes", a.classes.clone()));
        }
        Command::Omp(a) => {
            v.push(("dirs", a.dirs.clone()));
            v.push(("words", a.words.clone()));
            for (k, p) in [("bundle", &a.bundle), ("model", &a.model), ("classes", &a.classes)] {
                if let Some(p) = p {
                    v.push((k, p.clone()));
                }
            }
        }
        Command::Classify(a) => {
            data(&mut v, &a.data);
            v.push(("classes", a.classes.clone()));
            fit(&mut v, &a.fit);
        }
        Command::Segment(a) => {
            data(&mut v, &a.data);
            v.push(("classes", a.classes.clone()));
            fit(&mut v, &a.fit);
        }
        Command::Monitor(a) => {
            data(&mut v, &a.data);
            v.push(("concepts", a.concepts.clone()));
            fit(&mut v, &a.fit);
        }
        Command::Registers(a) => data(&mut v, &a.data),
        Command::Retrieve(a) => {
            data(&mut v, &a.data);
            if let Some(w) = &a.words {
                v.push(("words", w.clone()));
            }
            fit(&mut v, &a.fit);
        }
    }
    v
}

/// Output directory of a command, if it writes files.
pub fn out_dir(cmd: &Command) -> Option<&PathBuf> {
    match cmd {
        Command::Validate(_) => None,
        Command::Decompose(a) => a.out.as_ref(),
        Command::Directions(a) => Some(&a.out.out),
        Command::Ablate(a) => Some(&a.out.out),
        Command::Omp(a) => Some(&a.out.out),
        Command::Classify(a) => Some(&a.out.out),
        Command::Segment(a) => Some(&a.out.out),
        Command::Monitor(a) => Some(&a.out.out),
        Command::Registers(a) => Some(&a.out.out),
        Command::Retrieve(a) => Some(&a.out.out),
    }
}

impl fmt::Display for DirectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionKind::Pair => "pair",
            DirectionKind::Neuron => "neuron",
        })
    }
}
