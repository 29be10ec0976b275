// SPDX-License-Identifier: Apache-2.0

//! Labeled circuit corpora: generation, labeling, and the on-disk layout.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest.json          DatasetManifest
//! errors.csv             file,reason      (skipped or unreadable inputs)
//! circuits/<name>.aag    canonical ASCII AIGER
//! tensors/<name>.json    GraphTensors with self-loops
//! labels/<name>.csv      node_id,prob
//! pairs/<name>.csv       i,j,tt_dist
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aig::{parse_aag, random_aig, serialize_aag, to_graph_tensors, Aig, AigError, GraphTensors};
use crate::sim::{
    auto_labels, default_pair_count, sample_pairs, LabelMode, PairLabel, SimError,
    DEFAULT_EXACT_INPUT_CAP,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERRORS_FILE: &str = "errors.csv";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Aig(#[from] AigError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl ToString) -> DatasetError {
    DatasetError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// One labeled circuit.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub aig: Aig,
    /// Model input, self-loops included.
    pub graph: GraphTensors,
    pub probs: Vec<f64>,
    pub pairs: Vec<PairLabel>,
    pub label_mode: LabelMode,
}

impl Sample {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub count: usize,
    pub inputs: Span,
    pub ands: Span,
    /// Per-circuit inversion probability drawn uniformly from this range.
    pub invert_prob: (f64, f64),
    pub seed: u64,
}

impl GeneratorParams {
    /// The default desk-scale corpus.
    pub fn desk_scale(seed: u64) -> Self {
        GeneratorParams {
            count: 500,
            inputs: Span { min: 4, max: 12 },
            ands: Span { min: 20, max: 300 },
            invert_prob: (0.1, 0.5),
            seed,
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let (lo, hi) = self.invert_prob;
        if self.inputs.min < 2 || self.inputs.min > self.inputs.max {
            return Err(DatasetError::InvalidParams("need 2 <= min inputs <= max inputs".into()));
        }
        if self.ands.min > self.ands.max {
            return Err(DatasetError::InvalidParams("min ands exceeds max ands".into()));
        }
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(DatasetError::InvalidParams(format!(
                "invert probability range [{lo}, {hi}] is not inside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Seeded circuits, named `gen_00000`, `gen_00001`, ...
pub fn generate(params: &GeneratorParams) -> Result<Vec<(String, Aig)>, DatasetError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let n_in = rng.random_range(params.inputs.min..=params.inputs.max);
        let n_and = rng.random_range(params.ands.min..=params.ands.max);
        let (lo, hi) = params.invert_prob;
        let p = if lo == hi { lo } else { rng.random_range(lo..hi) };
        let seed = rng.next_u64();
        let aig = random_aig(seed, n_in, n_and, p)?;
        out.push((format!("gen_{i:05}"), aig));
    }
    Ok(out)
}

/// Limits applied when labeling; circuits outside them are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelCaps {
    /// Exhaustive tables up to this many inputs, sampled beyond.
    pub exact_inputs: usize,
    pub max_inputs: usize,
    pub max_nodes: usize,
}

impl Default for LabelCaps {
    fn default() -> Self {
        LabelCaps {
            exact_inputs: DEFAULT_EXACT_INPUT_CAP,
            max_inputs: 64,
            max_nodes: 20_000,
        }
    }
}

/// Seed for the `index`-th circuit's random streams.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// Labels one circuit, or explains why it was skipped.
pub fn label(name: &str, aig: Aig, caps: &LabelCaps, seed: u64) -> Result<Sample, String> {
    if aig.num_inputs() > caps.max_inputs {
        return Err(format!("{} inputs exceeds cap {}", aig.num_inputs(), caps.max_inputs));
    }
    if aig.num_nodes() > caps.max_nodes {
        return Err(format!("{} nodes exceeds cap {}", aig.num_nodes(), caps.max_nodes));
    }
    if aig.num_nodes() < 3 {
        return Err("fewer than 3 nodes leaves too few pairs".into());
    }
    let labels = auto_labels(&aig, caps.exact_inputs, seed).map_err(|e| e.to_string())?;
    let pairs = sample_pairs(&labels, default_pair_count(aig.num_nodes()), seed ^ 0x9A12)
        .map_err(|e| e.to_string())?;
    Ok(Sample {
        name: name.to_string(),
        graph: to_graph_tensors(&aig, true),
        aig,
        probs: labels.node_probs,
        pairs,
        label_mode: labels.mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInput {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Generated(GeneratorParams),
    Directory { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub name: String,
    pub num_inputs: usize,
    pub num_ands: usize,
    pub gate_ratio: f64,
    pub num_pairs: usize,
    pub label_mode: LabelMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source: DatasetSource,
    pub caps: LabelCaps,
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub skipped: Vec<SkippedInput>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Labels named circuits in order; per-circuit failures become skips.
pub fn build(circuits: Vec<(String, Aig)>, caps: &LabelCaps, seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(circuits.len());
    let mut skipped = Vec::new();
    for (i, (name, aig)) in circuits.into_iter().enumerate() {
        match label(&name, aig, caps, sample_seed(seed, i)) {
            Ok(s) => samples.push(s),
            Err(reason) => {
                log::warn!("skipping {name}: {reason}");
                skipped.push(SkippedInput { file: name, reason });
            }
        }
    }
    Dataset { samples, skipped }
}

/// Generated corpus, labeled.
pub fn generate_dataset(params: &GeneratorParams, caps: &LabelCaps) -> Result<Dataset, DatasetError> {
    Ok(build(generate(params)?, caps, params.seed))
}

/// Named circuits.
pub type Circuits = Vec<(String, Aig)>;

/// Parses every `*.aag` file of `dir` (sorted by name); unreadable or
/// invalid files are recorded and skipped.
pub fn read_aag_dir(dir: &Path) -> Result<(Circuits, Vec<SkippedInput>), DatasetError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "aag"))
        .collect();
    files.sort();
    let mut circuits = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let name = path.file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        match fs::read_to_string(&path) {
            Ok(text) => match parse_aag(&text) {
                Ok(aig) => circuits.push((name, aig)),
                Err(e) => skipped.push(SkippedInput {
                    file,
                    reason: e.to_string(),
                }),
            },
            Err(e) => skipped.push(SkippedInput {
                file,
                reason: e.to_string(),
            }),
        }
    }
    Ok((circuits, skipped))
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    node_id: usize,
    prob: f64,
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    i: usize,
    j: usize,
    tt_dist: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    num_nodes: usize,
    features: Vec<f64>,
    edge_src: Vec<usize>,
    edge_dst: Vec<usize>,
    edge_sign: Vec<f64>,
    gate_ratio: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| fmt_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| fmt_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| fmt_err(path, e))).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| fmt_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| fmt_err(path, e))
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn save(
    dataset: &Dataset,
    dir: &Path,
    source: DatasetSource,
    caps: &LabelCaps,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    for sub in ["circuits", "tensors", "labels", "pairs"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let p = dir.join("circuits").join(format!("{}.aag", s.name));
        fs::write(&p, serialize_aag(&s.aig)).map_err(io_err(&p))?;
        let g = &s.graph;
        write_json(
            &dir.join("tensors").join(format!("{}.json", s.name)),
            &TensorFile {
                num_nodes: g.num_nodes,
                features: g.features.clone(),
                edge_src: g.edge_src.clone(),
                edge_dst: g.edge_dst.clone(),
                edge_sign: g.edge_sign.clone(),
                gate_ratio: g.gate_ratio,
            },
        )?;
        write_csv(
            &dir.join("labels").join(format!("{}.csv", s.name)),
            s.probs.iter().enumerate().map(|(node_id, &prob)| LabelRow { node_id, prob }),
        )?;
        write_csv(
            &dir.join("pairs").join(format!("{}.csv", s.name)),
            s.pairs.iter().map(|p| PairRow {
                i: p.i,
                j: p.j,
                tt_dist: p.tt_distance,
            }),
        )?;
        entries.push(SampleEntry {
            name: s.name.clone(),
            num_inputs: s.aig.num_inputs(),
            num_ands: s.aig.num_ands(),
            gate_ratio: s.graph.gate_ratio,
            num_pairs: s.pairs.len(),
            label_mode: s.label_mode,
        });
    }
    write_csv(&dir.join(ERRORS_FILE), dataset.skipped.iter())?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        source,
        caps: *caps,
        seed,
        samples: entries,
        skipped: dataset.skipped.len(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`save`]. Model inputs are rebuilt
/// from the circuit files; labels and pairs come from their CSVs.
pub fn load(dir: &Path) -> Result<(Dataset, DatasetManifest), DatasetError> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(fmt_err(
            &dir.join(MANIFEST_FILE),
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let p = dir.join("circuits").join(format!("{}.aag", e.name));
        let aig = parse_aag(&fs::read_to_string(&p).map_err(io_err(&p))?)
            .map_err(|err| fmt_err(&p, err))?;
        let p = dir.join("labels").join(format!("{}.csv", e.name));
        let rows: Vec<LabelRow> = read_csv(&p)?;
        if rows.len() != aig.num_nodes() || rows.iter().enumerate().any(|(k, r)| r.node_id != k) {
            return Err(fmt_err(&p, "labels must list every node once, in order"));
        }
        let probs = rows.into_iter().map(|r| r.prob).collect();
        let p = dir.join("pairs").join(format!("{}.csv", e.name));
        let pairs: Vec<PairLabel> = read_csv::<PairRow>(&p)?
            .into_iter()
            .map(|r| PairLabel {
                i: r.i,
                j: r.j,
                tt_distance: r.tt_dist,
            })
            .collect();
        if pairs.iter().any(|q| q.i >= aig.num_nodes() || q.j >= aig.num_nodes()) {
            return Err(fmt_err(&p, "pair references a missing node"));
        }
        samples.push(Sample {
            name: e.name.clone(),
            graph: to_graph_tensors(&aig, true),
            aig,
            probs,
            pairs,
            label_mode: e.label_mode,
        });
    }
    let skipped = read_csv(&dir.join(ERRORS_FILE))?;
    Ok((Dataset { samples, skipped }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(seed: u64) -> GeneratorParams {
        GeneratorParams {
            count: 6,
            inputs: Span { min: 3, max: 5 },
            ands: Span { min: 5, max: 12 },
            invert_prob: (0.3, 0.3),
            seed,
        }
    }

    #[test]
    fn generator_is_seeded_and_within_ranges() {
        let a = generate(&small_params(1)).unwrap();
        let b = generate(&small_params(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&small_params(2)).unwrap());
        for (_, aig) in &a {
            assert!((3..=5).contains(&aig.num_inputs()));
            assert!((5..=12).contains(&aig.num_ands()));
        }
        let mut bad = small_params(1);
        bad.invert_prob = (0.6, 0.2);
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn labels_cover_every_node() {
        let ds = generate_dataset(&small_params(3), &LabelCaps::default()).unwrap();
        assert_eq!(ds.len(), 6);
        for s in &ds.samples {
            assert_eq!(s.probs.len(), s.num_nodes());
            assert_eq!(s.pairs.len(), default_pair_count(s.num_nodes()));
            assert_eq!(s.label_mode, LabelMode::Exact);
        }
    }

    #[test]
    fn caps_skip_with_reason() {
        let caps = LabelCaps {
            max_nodes: 10,
            ..LabelCaps::default()
        };
        let ds = generate_dataset(&small_params(3), &caps).unwrap();
        assert!(!ds.skipped.is_empty());
        assert!(ds.skipped.iter().all(|s| s.reason.contains("nodes exceeds cap")));
        assert_eq!(ds.len() + ds.skipped.len(), 6);
    }

    #[test]
    fn save_load_roundtrip_is_byte_stable() {
        let caps = LabelCaps::default();
        let ds = generate_dataset(&small_params(4), &caps).unwrap();
        let src = DatasetSource::Generated(small_params(4));
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = save(&ds, a.path(), src.clone(), &caps, 4).unwrap();
        save(&ds, b.path(), src, &caps, 4).unwrap();
        let (back, m2) = load(a.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m, m2);
        for sub in ["manifest.json", "labels/gen_00002.csv", "pairs/gen_00005.csv"] {
            assert_eq!(
                fs::read(a.path().join(sub)).unwrap(),
                fs::read(b.path().join(sub)).unwrap()
            );
        }
    }

    #[test]
    fn directory_with_one_bad_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("good.aag"), "aag 3 2 0 1 1\n2\n4\n6\n6 2 5\n").unwrap();
        fs::write(dir.path().join("bad.aag"), "aag 3 2 0 1\n").unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let (circuits, skipped) = read_aag_dir(dir.path()).unwrap();
        assert_eq!(circuits.len(), 1);
        assert_eq!(circuits[0].0, "good");
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].file, "bad.aag");
    }
}
