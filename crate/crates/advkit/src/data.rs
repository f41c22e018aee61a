//! Dataset ingestion and splitting.
//!
//! Every dataset is partitioned by a seeded shuffle into an evaluation
//! split (held out), a target-training half, and an attacker half. The
//! attacker half is stripped of its ground-truth labels at ingestion: the
//! only way the substitute pipeline can label those samples is through the
//! oracle.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub ids: Vec<u64>,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::stack(&self.inputs)
    }
}

/// Inputs without labels: the attacker's view of its own pool.
#[derive(Debug, Clone)]
pub struct UnlabeledSet {
    pub ids: Vec<u64>,
    pub inputs: Vec<Tensor>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `(id, input)` pairs for oracle pool construction.
    pub fn items(&self) -> Vec<(u64, Tensor)> {
        self.ids.iter().copied().zip(self.inputs.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    pub target_train: LabeledSet,
    pub attacker_pool: UnlabeledSet,
    pub evaluation: LabeledSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataFormat {
    /// MNIST-style `<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte` pair.
    Idx,
    /// Rows of `label, feature, feature, ...`.
    Csv,
    /// Built-in generator, e.g. `synthetic:blobs:k=3,n=900,d=8,noise=0.1`.
    Synthetic(String),
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DataFormat::Idx),
            "csv" => Ok(DataFormat::Csv),
            other => match other.strip_prefix("synthetic:") {
                Some(spec) => Ok(DataFormat::Synthetic(spec.to_string())),
                None => Err(Error::config("dataset.format", format!("unknown format `{other}`"))),
            },
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataFormat::Idx => write!(f, "idx"),
            DataFormat::Csv => write!(f, "csv"),
            DataFormat::Synthetic(spec) => write!(f, "synthetic:{spec}"),
        }
    }
}

/// Gaussian blob generator parameters: `k` classes of `n/k`-ish points in
/// `d` dimensions with per-axis noise `noise`, clipped into `[0,1]`. Each
/// class owns `modes` sub-clusters, so `modes > 1` yields class regions a
/// handful of labels cannot pin down while the cluster structure remains
/// visible to unlabeled consumers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub noise: f64,
    pub modes: usize,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { k: 3, n: 900, d: 8, noise: 0.1, modes: 1 }
    }
}

impl FromStr for BlobSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = BlobSpec::default();
        let rest = match s.strip_prefix("blobs") {
            Some("") => return Ok(spec),
            Some(rest) => rest
                .strip_prefix(':')
                .ok_or_else(|| Error::config("dataset.format", format!("bad generator `{s}`")))?,
            None => {
                return Err(Error::config("dataset.format", format!("unknown generator `{s}`")))
            }
        };
        for kv in rest.split(',') {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::config("dataset.format", format!("bad generator arg `{kv}`")))?;
            let bad = |e: String| Error::config("dataset.format", format!("`{kv}`: {e}"));
            match key {
                "k" => spec.k = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "n" => spec.n = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "d" => spec.d = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "noise" => {
                    spec.noise =
                        value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                "modes" => {
                    spec.modes =
                        value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
                }
                other => return Err(Error::config("dataset.format", format!("unknown generator key `{other}`"))),
            }
        }
        if spec.k < 2 || spec.n < spec.k || spec.d == 0 || spec.modes == 0 {
            return Err(Error::config("dataset.format", format!("degenerate blob spec {spec:?}")));
        }
        Ok(spec)
    }
}

/// Mode centers placed greedily with a minimum pairwise separation, then
/// points as clipped Gaussians around a cycling mode of their class.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_modes = spec.k * spec.modes;
    let mut min_dist = 0.45;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(total_modes);
    while centers.len() < total_modes {
        let mut placed = false;
        for _ in 0..200 {
            let cand: Vec<f64> = (0..spec.d).map(|_| rng.random_range(0.2..0.8)).collect();
            let ok = centers.iter().all(|c| {
                let d2: f64 = cand.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                d2.sqrt() >= min_dist
            });
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            // Crowded box: relax the separation and keep going.
            min_dist *= 0.95;
        }
    }
    let mut inputs = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.k;
        let mode = (i / spec.k) % spec.modes;
        let center = &centers[class * spec.modes + mode];
        let point: Vec<f64> = center
            .iter()
            .map(|&c| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (c + spec.noise * z).clamp(0.0, 1.0)
            })
            .collect();
        inputs.push(Tensor::new(vec![spec.d], point).expect("blob shape"));
        labels.push(class);
    }
    (inputs, labels)
}

/// Split policy: a held-out evaluation fraction, then equal halves for
/// target training and the attacker pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { eval_fraction: 0.2, seed: 0 }
    }
}

pub fn load_dataset(path: &str, format: &DataFormat, split: &SplitConfig) -> Result<Dataset> {
    let (name, inputs, labels) = match format {
        DataFormat::Synthetic(spec_str) => {
            let spec: BlobSpec = spec_str.parse()?;
            let (inputs, labels) = generate_blobs(&spec, split.seed);
            (format!("synthetic:{spec_str}"), inputs, labels)
        }
        DataFormat::Idx => {
            let (inputs, labels) = load_idx_pair(Path::new(path))?;
            (path.to_string(), inputs, labels)
        }
        DataFormat::Csv => {
            let (inputs, labels) = load_csv(Path::new(path))?;
            (path.to_string(), inputs, labels)
        }
    };
    split_dataset(name, inputs, labels, split)
}

fn split_dataset(
    name: String,
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    split: &SplitConfig,
) -> Result<Dataset> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::contract(
            "split_dataset",
            format!("{} inputs vs {} labels", inputs.len(), labels.len()),
        ));
    }
    if !(0.0..1.0).contains(&split.eval_fraction) {
        return Err(Error::config("dataset.eval_fraction", "must lie in [0, 1)"));
    }
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let input_shape = inputs[0].shape().to_vec();

    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    order.shuffle(&mut rng);

    let n_eval = (split.eval_fraction * n as f64).round() as usize;
    let remainder = n - n_eval;
    let n_target = remainder.div_ceil(2);

    let collect_labeled = |idx: &[usize]| LabeledSet {
        ids: idx.iter().map(|&i| i as u64).collect(),
        inputs: idx.iter().map(|&i| inputs[i].clone()).collect(),
        labels: idx.iter().map(|&i| labels[i]).collect(),
    };
    let evaluation = collect_labeled(&order[..n_eval]);
    let target_train = collect_labeled(&order[n_eval..n_eval + n_target]);
    // Ground truth is dropped here; only the oracle can label these.
    let attacker_idx = &order[n_eval + n_target..];
    let attacker_pool = UnlabeledSet {
        ids: attacker_idx.iter().map(|&i| i as u64).collect(),
        inputs: attacker_idx.iter().map(|&i| inputs[i].clone()).collect(),
    };

    Ok(Dataset { name, num_classes, input_shape, target_train, attacker_pool, evaluation })
}

// ---- idx ------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Load `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte`.
pub fn load_idx_pair(prefix: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let images_path = with_suffix(prefix, "-images-idx3-ubyte");
    let labels_path = with_suffix(prefix, "-labels-idx1-ubyte");
    let images = load_idx_images(&images_path)?;
    let labels = load_idx_labels(&labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            position: "header".into(),
            detail: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    Ok((images, labels))
}

fn with_suffix(prefix: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}

fn read_u32_be(reader: &mut impl Read, path: &Path, offset: usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| Error::Format {
        path: path.display().to_string(),
        position: format!("byte {offset}"),
        detail: e.to_string(),
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn load_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let mut reader = std::io::BufReader::new(file);
    let magic = read_u32_be(&mut reader, path, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            position: "byte 0".into(),
            detail: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(&mut reader, path, 4)? as usize;
    let rows = read_u32_be(&mut reader, path, 8)? as usize;
    let cols = read_u32_be(&mut reader, path, 12)? as usize;
    let mut raw = vec![0u8; count * rows * cols];
    reader.read_exact(&mut raw).map_err(|e| Error::Format {
        path: path.display().to_string(),
        position: "byte 16".into(),
        detail: format!("truncated pixel data: {e}"),
    })?;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let pixels: Vec<f64> =
            raw[i * rows * cols..(i + 1) * rows * cols].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![1, rows, cols], pixels)?);
    }
    Ok(images)
}

fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let mut reader = std::io::BufReader::new(file);
    let magic = read_u32_be(&mut reader, path, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            position: "byte 0".into(),
            detail: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(&mut reader, path, 4)? as usize;
    let mut raw = vec![0u8; count];
    reader.read_exact(&mut raw).map_err(|e| Error::Format {
        path: path.display().to_string(),
        position: "byte 8".into(),
        detail: format!("truncated label data: {e}"),
    })?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

// ---- csv ------------------------------------------------------------------

/// Rows of `label, feature, ...`. Features are min-max scaled per column
/// into `[0,1]` unless they already fit.
pub fn load_csv(path: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut arity = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            path: path.display().to_string(),
            position: format!("line {}", lineno + 1),
            detail,
        };
        let mut fields = line.split(',').map(str::trim);
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| bad(format!("bad label: {e}")))?;
        let feats: std::result::Result<Vec<f64>, _> = fields.map(str::parse).collect();
        let feats = feats.map_err(|e| bad(format!("bad feature: {e}")))?;
        match arity {
            None => arity = Some(feats.len()),
            Some(a) if a != feats.len() => {
                return Err(bad(format!("expected {a} features, got {}", feats.len())))
            }
            _ => {}
        }
        if feats.is_empty() {
            return Err(bad("row has no features".into()));
        }
        labels.push(label);
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            position: "line 1".into(),
            detail: "no data rows".into(),
        });
    }
    let d = rows[0].len();
    let already_unit = rows.iter().flatten().all(|&v| (0.0..=1.0).contains(&v));
    if !already_unit {
        for j in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in &rows {
                lo = lo.min(r[j]);
                hi = hi.max(r[j]);
            }
            let span = hi - lo;
            for r in &mut rows {
                r[j] = if span > 0.0 { (r[j] - lo) / span } else { 0.5 };
            }
        }
    }
    let inputs =
        rows.into_iter().map(|r| Tensor::new(vec![d], r)).collect::<Result<Vec<_>>>()?;
    Ok((inputs, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blob_dataset_has_documented_split_sizes_and_unit_values() {
        let format: DataFormat = "synthetic:blobs:k=3,n=900,d=8,noise=0.1".parse().unwrap();
        let ds = load_dataset("", &format, &SplitConfig { eval_fraction: 0.2, seed: 7 }).unwrap();
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.evaluation.len(), 180);
        assert_eq!(ds.target_train.len(), 360);
        assert_eq!(ds.attacker_pool.len(), 360);
        for set in [&ds.target_train.inputs, &ds.evaluation.inputs, &ds.attacker_pool.inputs] {
            for t in set.iter() {
                assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        // Ids partition the original index space.
        let mut ids: Vec<u64> = ds
            .target_train
            .ids
            .iter()
            .chain(&ds.attacker_pool.ids)
            .chain(&ds.evaluation.ids)
            .copied()
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..900).collect::<Vec<u64>>());
    }

    #[test]
    fn splits_replay_under_a_fixed_seed() {
        let format: DataFormat = "synthetic:blobs".parse().unwrap();
        let split = SplitConfig { eval_fraction: 0.1, seed: 42 };
        let a = load_dataset("", &format, &split).unwrap();
        let b = load_dataset("", &format, &split).unwrap();
        assert_eq!(a.attacker_pool.ids, b.attacker_pool.ids);
        assert_eq!(a.evaluation.ids, b.evaluation.ids);
    }

    fn write_idx_fixture(dir: &Path, images: &[[u8; 4]], labels: &[u8]) -> std::path::PathBuf {
        let prefix = dir.join("tiny");
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        std::fs::File::create(with_suffix(&prefix, "-images-idx3-ubyte"))
            .unwrap()
            .write_all(&img)
            .unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&2049u32.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        std::fs::File::create(with_suffix(&prefix, "-labels-idx1-ubyte"))
            .unwrap()
            .write_all(&lab)
            .unwrap();
        prefix
    }

    #[test]
    fn idx_fixture_parses_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<[u8; 4]> = (0..10u8).map(|i| [i, 255 - i, 2 * i, 128]).collect();
        let labels: Vec<u8> = (0..10u8).map(|i| i % 3).collect();
        let prefix = write_idx_fixture(dir.path(), &images, &labels);
        let (inputs, got_labels) = load_idx_pair(&prefix).unwrap();
        assert_eq!(inputs.len(), 10);
        assert_eq!(got_labels, labels.iter().map(|&b| b as usize).collect::<Vec<_>>());
        for (t, im) in inputs.iter().zip(&images) {
            assert_eq!(t.shape(), &[1, 2, 2]);
            for (v, &b) in t.data().iter().zip(im) {
                assert_eq!(*v, b as f64 / 255.0);
            }
        }
    }

    #[test]
    fn idx_bad_magic_reports_byte_position() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = write_idx_fixture(dir.path(), &[[0, 0, 0, 0]], &[0]);
        // Corrupt the images magic.
        let img_path = with_suffix(&prefix, "-images-idx3-ubyte");
        let mut bytes = std::fs::read(&img_path).unwrap();
        bytes[0] = 0xFF;
        std::fs::write(&img_path, bytes).unwrap();
        let err = load_idx_pair(&prefix).unwrap_err();
        match err {
            Error::Format { position, detail, .. } => {
                assert_eq!(position, "byte 0");
                assert!(detail.contains("magic"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_malformed_row_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        std::fs::write(&path, "0, 0.1, 0.2\n1, 0.5, oops\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        match err {
            Error::Format { position, .. } => assert_eq!(position, "line 2"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_scales_out_of_range_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.csv");
        std::fs::write(&path, "0, -5, 10\n1, 5, 30\n0, 0, 20\n").unwrap();
        let (inputs, labels) = load_csv(&path).unwrap();
        assert_eq!(labels, vec![0, 1, 0]);
        for t in &inputs {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(inputs[0].data(), &[0.0, 0.0]);
        assert_eq!(inputs[1].data(), &[1.0, 1.0]);
    }

    #[test]
    fn blob_spec_parsing() {
        let spec: BlobSpec = "blobs:k=4,n=100,d=6,noise=0.2,modes=3".parse().unwrap();
        assert_eq!(spec, BlobSpec { k: 4, n: 100, d: 6, noise: 0.2, modes: 3 });
        assert_eq!("blobs".parse::<BlobSpec>().unwrap(), BlobSpec::default());
        assert!("rings".parse::<BlobSpec>().is_err());
        assert!("blobs:k=1".parse::<BlobSpec>().is_err());
    }
}
