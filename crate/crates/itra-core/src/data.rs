//! Dataset ingestion (IDX and CSV), seeded Gaussian-mixture generation for
//! multi-modality experiments, and the dual mini-batch pair sampler that
//! feeds the matching objective.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Per-channel standardization statistics, computed on a training split and
/// then applied verbatim to every other split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A dense labeled dataset with row-flattened inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, d]` inputs.
    pub inputs: Tensor,
    /// One class index per row, each `< num_classes`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// For synthetic mixtures: which mode of its class generated each
    /// sample (index within the class's mode list).
    pub mode_ids: Option<Vec<usize>>,
    /// The standardization that has been applied to `inputs`, if any.
    pub norm: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if !inputs.is_2d() || inputs.rows() == 0 {
            return Err(Error::contract(
                "dataset",
                format!("inputs must be a nonempty [n, d] tensor, got {:?}", inputs.shape()),
            ));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::contract(
                "dataset",
                format!("{} labels for {} rows", labels.len(), inputs.rows()),
            ));
        }
        if num_classes < 2 {
            return Err(Error::contract(
                "dataset",
                format!("need at least 2 classes, got {num_classes}"),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(
                "dataset",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            mode_ids: None,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires n >= 1
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Computes per-channel mean and standard deviation over all samples and
    /// standardizes in place. A channel is one of `channels` equal
    /// contiguous blocks of the flattened input (so 1 treats the whole
    /// vector as a single channel). Standard deviations are floored at 1e-8
    /// so constant channels stay finite.
    pub fn normalize_in_place(&mut self, channels: usize) -> Result<Normalization> {
        let d = self.dim();
        if channels == 0 || d % channels != 0 {
            return Err(Error::contract(
                "normalize",
                format!("{channels} channels do not divide input width {d}"),
            ));
        }
        let block = d / channels;
        let n = self.len();
        let count = (n * block) as f64;
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for row in 0..n {
            let r = self.inputs.row(row);
            for c in 0..channels {
                for v in &r[c * block..(c + 1) * block] {
                    mean[c] += v;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for row in 0..n {
            let r = self.inputs.row(row);
            for c in 0..channels {
                for v in &r[c * block..(c + 1) * block] {
                    std[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        for s in std.iter_mut() {
            *s = (*s / count).sqrt().max(1e-8);
        }
        let norm = Normalization { mean, std };
        self.apply_normalization(&norm)?;
        Ok(norm)
    }

    /// Standardizes with statistics computed elsewhere (the training
    /// split's). Refuses to stack normalizations.
    pub fn apply_normalization(&mut self, norm: &Normalization) -> Result<()> {
        if self.norm.is_some() {
            return Err(Error::contract("normalize", "dataset is already standardized"));
        }
        let d = self.dim();
        let channels = norm.mean.len();
        if channels == 0 || norm.std.len() != channels || d % channels != 0 {
            return Err(Error::contract(
                "normalize",
                format!(
                    "statistics with {}/{} channels do not fit input width {d}",
                    norm.mean.len(),
                    norm.std.len()
                ),
            ));
        }
        let block = d / channels;
        let data = self.inputs.data_mut();
        for row in data.chunks_exact_mut(d) {
            for c in 0..channels {
                for v in &mut row[c * block..(c + 1) * block] {
                    *v = (*v - norm.mean[c]) / norm.std[c];
                }
            }
        }
        self.norm = Some(norm.clone());
        Ok(())
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

// ---------------------------------------------------------------------------
// IDX loading
// ---------------------------------------------------------------------------

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(IdxReader {
            path,
            bytes: fs::read(path)?,
            pos: 0,
        })
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let Some(chunk) = self.bytes.get(self.pos..self.pos + 4) else {
            return Err(self.err(self.pos, format!("truncated reading {what}")));
        };
        let v = u32::from_be_bytes(chunk.try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn payload(&mut self, count: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() < self.pos + count {
            return Err(self.err(
                self.bytes.len(),
                format!(
                    "truncated {what}: need {count} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let start = self.pos;
        self.pos += count;
        Ok(&self.bytes[start..start + count])
    }
}

/// Loads a big-endian IDX image/label file pair (the KMNIST/FMNIST
/// distribution format). Pixels are scaled from `0..=255` to `[0, 1]`;
/// the class count is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = IdxReader::open(images_path)?;
    let magic = img.u32_be("image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(img.err(0, format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let n = img.u32_be("image count")? as usize;
    let rows = img.u32_be("row count")? as usize;
    let cols = img.u32_be("column count")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(img.err(4, format!("empty image file: {n} x {rows} x {cols}")));
    }
    let pixels = img.payload(n * rows * cols, "pixel data")?;
    let inputs: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();

    let mut lab = IdxReader::open(labels_path)?;
    let magic = lab.u32_be("label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(lab.err(0, format!("label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")));
    }
    let n_labels = lab.u32_be("label count")? as usize;
    if n_labels != n {
        return Err(lab.err(4, format!("{n_labels} labels for {n} images")));
    }
    let labels: Vec<usize> = lab.payload(n, "label data")?.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().unwrap() + 1;
    Dataset::new(
        Tensor::new(vec![n, rows * cols], inputs)?,
        labels,
        num_classes.max(2),
    )
}

// ---------------------------------------------------------------------------
// CSV loading and export
// ---------------------------------------------------------------------------

/// Loads a dense CSV of `label, feature...` rows. The class count is the
/// largest label plus one.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let line_err = |line: usize, msg: String| Error::CsvLine {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    let skip = usize::from(has_header);
    for (idx, raw) in text.lines().enumerate().skip(skip) {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap();
        let label: usize = label_field
            .trim()
            .parse()
            .map_err(|_| line_err(line_no, format!("label {label_field:?} is not a class index")))?;
        let mut row = 0usize;
        for field in fields {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| line_err(line_no, format!("cell {field:?} is not a number")))?;
            values.push(v);
            row += 1;
        }
        match width {
            None => {
                if row == 0 {
                    return Err(line_err(line_no, "row has a label but no features".into()));
                }
                width = Some(row);
            }
            Some(w) if w != row => {
                return Err(line_err(line_no, format!("row has {row} features, expected {w}")));
            }
            _ => {}
        }
        labels.push(label);
    }
    let Some(width) = width else {
        return Err(line_err(1, "no data rows".into()));
    };
    let n = labels.len();
    let num_classes = labels.iter().max().unwrap() + 1;
    Dataset::new(Tensor::new(vec![n, width], values)?, labels, num_classes.max(2))
}

/// Writes `label, feature...` rows. Floats use the shortest representation
/// that parses back to the identical value, so write-then-read is lossless.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, &label) in ds.labels.iter().enumerate() {
        write!(out, "{label}")?;
        for v in ds.inputs.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian mixtures
// ---------------------------------------------------------------------------

/// One isotropic Gaussian mode of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub mean: Vec<f64>,
    pub std: f64,
    pub count: usize,
}

/// A class as a list of modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub modes: Vec<ModeSpec>,
}

/// Seeded synthetic dataset description: `classes[k].modes[j]` contributes
/// `count` samples of class `k` drawn from `N(mean, std^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
}

impl MixtureSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "mixture needs at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        let mut total = 0usize;
        for (k, class) in self.classes.iter().enumerate() {
            if class.modes.is_empty() {
                return Err(Error::Config(format!("class {k} has no modes")));
            }
            for (j, mode) in class.modes.iter().enumerate() {
                if mode.mean.len() != self.dim {
                    return Err(Error::Config(format!(
                        "class {k} mode {j}: mean has dim {}, spec says {}",
                        mode.mean.len(),
                        self.dim
                    )));
                }
                if !(mode.std > 0.0) {
                    return Err(Error::Config(format!(
                        "class {k} mode {j}: std must be positive, got {}",
                        mode.std
                    )));
                }
                total += mode.count;
            }
            if class.modes.iter().all(|m| m.count == 0) {
                return Err(Error::Config(format!("class {k} has zero samples")));
            }
        }
        if total == 0 {
            return Err(Error::Config("mixture has zero samples".into()));
        }
        Ok(())
    }
}

/// Draws the mixture deterministically: classes in order, modes in order,
/// samples in order, one fresh generator seeded from the spec.
/// `mode_ids[i]` records which mode (index within its class) produced
/// sample `i`, for the modality diagnostics.
pub fn gen_gaussian_mixture(spec: &MixtureSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut mode_ids = Vec::new();
    for (k, class) in spec.classes.iter().enumerate() {
        for (j, mode) in class.modes.iter().enumerate() {
            for _ in 0..mode.count {
                for &mu in &mode.mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    values.push(mu + mode.std * z);
                }
                labels.push(k);
                mode_ids.push(j);
            }
        }
    }
    let n = labels.len();
    let mut ds = Dataset::new(
        Tensor::new(vec![n, spec.dim], values)?,
        labels,
        spec.classes.len(),
    )?;
    ds.mode_ids = Some(mode_ids);
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Pair sampling
// ---------------------------------------------------------------------------

/// One sampled mini-batch, with the dataset rows it came from.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Dataset row of each batch sample.
    pub indices: Vec<usize>,
}

/// Two independently drawn mini-batches from the same dataset. The second
/// batch feeds only the distribution-matching term, never the
/// classification loss.
#[derive(Debug, Clone)]
pub struct MiniBatchPair {
    pub batch1: LabeledBatch,
    pub batch2: LabeledBatch,
}

/// Draws a mini-batch pair. Each batch is sampled without replacement
/// within itself; the two batches are independent draws and may overlap.
/// Stratified mode allocates `m / K` samples per class, handing the
/// remainder to `m mod K` distinct random classes, so every class appears
/// in both batches whenever `m >= K`.
///
/// Generator call order is fixed (batch 1 fully drawn, then batch 2;
/// within a stratified draw: remainder classes, then class 0..K), so equal
/// seeds give bit-identical pairs.
pub fn sample_pair<R: Rng>(
    ds: &Dataset,
    m1: usize,
    m2: usize,
    rng: &mut R,
    stratified: bool,
) -> Result<MiniBatchPair> {
    Ok(MiniBatchPair {
        batch1: draw_batch(ds, m1, rng, stratified)?,
        batch2: draw_batch(ds, m2, rng, stratified)?,
    })
}

/// Draws a single mini-batch with the same rules as one half of
/// [`sample_pair`]. Methods that never touch a second batch use this so
/// they consume no generator state for it.
pub fn sample_batch<R: Rng>(
    ds: &Dataset,
    m: usize,
    rng: &mut R,
    stratified: bool,
) -> Result<LabeledBatch> {
    draw_batch(ds, m, rng, stratified)
}

fn draw_batch<R: Rng>(ds: &Dataset, m: usize, rng: &mut R, stratified: bool) -> Result<LabeledBatch> {
    let n = ds.len();
    if m == 0 || m > n {
        return Err(Error::contract(
            "sample_pair",
            format!("batch size {m} not in 1..={n}"),
        ));
    }
    let indices = if stratified {
        let k = ds.num_classes;
        if m < k {
            return Err(Error::contract(
                "sample_pair",
                format!("stratified batch of {m} cannot cover {k} classes"),
            ));
        }
        let by_class = ds.indices_by_class();
        let quota = m / k;
        let remainder = m % k;
        let mut extra = vec![0usize; k];
        for cls in rand::seq::index::sample(rng, k, remainder) {
            extra[cls] = 1;
        }
        let mut indices = Vec::with_capacity(m);
        for (cls, pool) in by_class.iter().enumerate() {
            let need = quota + extra[cls];
            if pool.len() < need {
                return Err(Error::contract(
                    "sample_pair",
                    format!("class {cls} has {} samples, stratified batch needs {need}", pool.len()),
                ));
            }
            for pick in rand::seq::index::sample(rng, pool.len(), need) {
                indices.push(pool[pick]);
            }
        }
        indices
    } else {
        rand::seq::index::sample(rng, n, m).into_vec()
    };
    let d = ds.dim();
    let mut values = Vec::with_capacity(indices.len() * d);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in &indices {
        values.extend_from_slice(ds.inputs.row(i));
        labels.push(ds.labels[i]);
    }
    Ok(LabeledBatch {
        inputs: Tensor::new(vec![indices.len(), d], values)?,
        labels,
        indices,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand-assembled two-image IDX pair (2x2 pixels), written byte by byte
    /// so the loader is checked against the format definition rather than
    /// against itself.
    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[0, 51, 102, 255, 204, 153, 0, 255]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 2]);
        (images, labels)
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_round_trips_to_known_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture();
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels, vec![7, 2]);
        assert_eq!(ds.num_classes, 8);
        let expected = [0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0];
        assert_eq!(ds.inputs.row(0), &expected);
        assert_eq!(ds.inputs.row(1), &[204.0 / 255.0, 153.0 / 255.0, 0.0, 1.0]);
    }

    #[test]
    fn idx_rejects_bad_magic_count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture();

        let mut bad = images.clone();
        bad[3] = 0x04; // image magic off by one
        let (ip, lp) = write_pair(dir.path(), &bad, &labels);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let mut bad = labels.clone();
        bad[3] = 0x03; // label file with image magic
        let (ip, lp) = write_pair(dir.path(), &images, &bad);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let mut bad = labels.clone();
        bad[7] = 3; // claims 3 labels for 2 images
        bad.push(9);
        let (ip, lp) = write_pair(dir.path(), &images, &bad);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");

        let truncated = images[..images.len() - 3].to_vec();
        let (ip, lp) = write_pair(dir.path(), &truncated, &labels);
        let err = load_idx(&ip, &lp).unwrap_err();
        let Error::Format { offset, .. } = err else {
            panic!("expected format error, got {err}");
        };
        assert_eq!(offset, (images.len() - 3) as u64);
    }

    #[test]
    fn csv_parses_label_first_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        fs::write(&path, "0,1.0,2.0\n1,3.0,4.0\n").unwrap();
        let ds = load_csv(&path, false).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.inputs.row(1), &[3.0, 4.0]);

        let with_header = dir.path().join("hdr.csv");
        fs::write(&with_header, "label,f1,f2\r\n0,1.0,2.0\r\n1,3.0,4.0\r\n").unwrap();
        let ds2 = load_csv(&with_header, true).unwrap();
        assert_eq!(ds2.labels, ds.labels);
        assert_eq!(ds2.inputs.data(), ds.inputs.data());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        fs::write(&path, "0,1.0,2.0\n1,3.0\n").unwrap();
        let err = load_csv(&path, false).unwrap_err();
        assert!(matches!(err, Error::CsvLine { line: 2, .. }), "{err}");

        fs::write(&path, "h,a,b\n0,1.0,2.0\n1,3.0,oops\n").unwrap();
        let err = load_csv(&path, true).unwrap_err();
        assert!(matches!(err, Error::CsvLine { line: 3, .. }), "{err}");

        fs::write(&path, "").unwrap();
        let err = load_csv(&path, false).unwrap_err();
        assert!(matches!(err, Error::CsvLine { line: 1, .. }), "{err}");

        fs::write(&path, "2.5,1.0\n").unwrap();
        let err = load_csv(&path, false).unwrap_err();
        assert!(matches!(err, Error::CsvLine { line: 1, .. }), "{err}");
    }

    #[test]
    fn csv_round_trip_is_lossless_on_a_thousand_random_rows() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1000;
        let d = 5;
        let values: Vec<f64> = (0..n * d)
            .map(|_| {
                // Mix magnitudes so the shortest-representation printing is
                // exercised across exponents.
                let v: f64 = StandardNormal.sample(&mut rng);
                v * 10f64.powi(rng.random_range(-8..8))
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 7).collect();
        let ds = Dataset::new(Tensor::new(vec![n, d], values).unwrap(), labels, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, false).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes, ds.num_classes);
        assert!(back
            .inputs
            .data()
            .iter()
            .zip(ds.inputs.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    fn two_mode_spec(seed: u64) -> MixtureSpec {
        MixtureSpec {
            dim: 3,
            seed,
            classes: vec![
                ClassSpec {
                    modes: vec![
                        ModeSpec { mean: vec![0.0, 0.0, 0.0], std: 0.5, count: 400 },
                        ModeSpec { mean: vec![4.0, 4.0, 4.0], std: 0.5, count: 300 },
                    ],
                },
                ClassSpec {
                    modes: vec![ModeSpec { mean: vec![-3.0, 1.0, 2.0], std: 1.0, count: 500 }],
                },
            ],
        }
    }

    #[test]
    fn mixture_is_seed_deterministic_with_correct_mode_metadata() {
        let a = gen_gaussian_mixture(&two_mode_spec(5)).unwrap();
        let b = gen_gaussian_mixture(&two_mode_spec(5)).unwrap();
        let c = gen_gaussian_mixture(&two_mode_spec(6)).unwrap();
        assert!(a
            .inputs
            .data()
            .iter()
            .zip(b.inputs.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.inputs.data(), c.inputs.data());
        let modes = a.mode_ids.as_ref().unwrap();
        assert_eq!(modes.iter().filter(|&&m| m == 0).count(), 900);
        assert_eq!(modes.iter().filter(|&&m| m == 1).count(), 300);
        assert_eq!(a.labels.iter().filter(|&&y| y == 0).count(), 700);
        assert_eq!(a.len(), 1200);
    }

    #[test]
    fn mixture_empirical_mode_means_are_near_spec_means() {
        let spec = two_mode_spec(31);
        let ds = gen_gaussian_mixture(&spec).unwrap();
        let modes = ds.mode_ids.as_ref().unwrap();
        for (k, class) in spec.classes.iter().enumerate() {
            for (j, mode) in class.modes.iter().enumerate() {
                let rows: Vec<usize> = (0..ds.len())
                    .filter(|&i| ds.labels[i] == k && modes[i] == j)
                    .collect();
                assert_eq!(rows.len(), mode.count);
                let tol = 4.0 * mode.std / (mode.count as f64).sqrt();
                for c in 0..spec.dim {
                    let mean: f64 =
                        rows.iter().map(|&i| ds.inputs.row(i)[c]).sum::<f64>() / rows.len() as f64;
                    assert!(
                        (mean - mode.mean[c]).abs() <= tol,
                        "class {k} mode {j} coord {c}: {mean} vs {}",
                        mode.mean[c]
                    );
                }
            }
        }
    }

    #[test]
    fn mixture_spec_validation_rejects_degenerate_cases() {
        let mut bad = two_mode_spec(0);
        bad.classes[0].modes[0].std = 0.0;
        assert!(gen_gaussian_mixture(&bad).is_err());
        let mut bad = two_mode_spec(0);
        bad.classes[1].modes[0].mean = vec![0.0];
        assert!(gen_gaussian_mixture(&bad).is_err());
        let mut bad = two_mode_spec(0);
        bad.classes.truncate(1);
        assert!(gen_gaussian_mixture(&bad).is_err());
        let mut bad = two_mode_spec(0);
        bad.classes[0].modes.clear();
        assert!(gen_gaussian_mixture(&bad).is_err());
    }

    fn toy_dataset(n: usize, k: usize) -> Dataset {
        let values: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        Dataset::new(Tensor::new(vec![n, 2], values).unwrap(), labels, k).unwrap()
    }

    #[test]
    fn full_size_batch_is_a_permutation() {
        let ds = toy_dataset(20, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = sample_pair(&ds, 20, 5, &mut rng, false).unwrap();
        let mut seen = pair.batch1.indices.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(pair.batch2.indices.len(), 5);
    }

    #[test]
    fn equal_seeds_give_bit_identical_pairs() {
        let ds = toy_dataset(50, 5);
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_pair(&ds, 12, 9, &mut rng, true).unwrap()
        };
        let (a, b, c) = (draw(3), draw(3), draw(4));
        assert_eq!(a.batch1.indices, b.batch1.indices);
        assert_eq!(a.batch2.indices, b.batch2.indices);
        assert_eq!(a.batch1.inputs.data(), b.batch1.inputs.data());
        assert_ne!(
            (a.batch1.indices.clone(), a.batch2.indices.clone()),
            (c.batch1.indices.clone(), c.batch2.indices.clone())
        );
    }

    #[test]
    fn stratified_batch_of_150_over_10_classes_has_15_per_class() {
        let ds = toy_dataset(400, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pair = sample_pair(&ds, 150, 150, &mut rng, true).unwrap();
        for batch in [&pair.batch1, &pair.batch2] {
            let mut counts = vec![0usize; 10];
            for &y in &batch.labels {
                counts[y] += 1;
            }
            assert!(counts.iter().all(|&c| c == 15), "{counts:?}");
            let mut uniq = batch.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 150, "within-batch draw must be without replacement");
        }
    }

    #[test]
    fn stratified_rejects_batches_smaller_than_class_count() {
        let ds = toy_dataset(40, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_pair(&ds, 9, 9, &mut rng, true).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }), "{err}");
        // Oversized batches fail in either mode.
        assert!(sample_pair(&ds, 41, 9, &mut rng, false).is_err());
    }

    #[test]
    fn normalization_standardizes_train_and_transfers_to_test() {
        let mut train = toy_dataset(30, 3);
        let mut test = toy_dataset(10, 3);
        let norm = train.normalize_in_place(2).unwrap();
        assert_eq!(norm.mean.len(), 2);
        // Per-channel mean 0 and variance 1 after standardizing.
        for c in 0..2 {
            let vals: Vec<f64> = (0..train.len()).map(|i| train.inputs.row(i)[c]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        test.apply_normalization(&norm).unwrap();
        assert_eq!(test.norm.as_ref(), Some(&norm));
        // The test split uses the train statistics, not its own.
        assert!(test.apply_normalization(&norm).is_err());
        assert!((test.inputs.row(0)[0] - (0.0 - norm.mean[0]) / norm.std[0]).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_stratified_batches_cover_every_class(
            seed in 0u64..1000,
            k in 2usize..6,
            m_extra in 0usize..12,
        ) {
            let per_class = 8;
            let ds = toy_dataset(per_class * k, k);
            let m = k + m_extra.min(per_class * k - k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = sample_pair(&ds, m, m, &mut rng, true).unwrap();
            for batch in [&pair.batch1, &pair.batch2] {
                let mut counts = vec![0usize; k];
                for &y in &batch.labels {
                    counts[y] += 1;
                }
                let quota = m / k;
                prop_assert!(counts.iter().all(|&c| c == quota || c == quota + 1));
                prop_assert_eq!(counts.iter().sum::<usize>(), m);
            }
        }

        #[test]
        fn prop_uniform_batches_draw_without_replacement(
            seed in 0u64..1000,
            m in 1usize..30,
        ) {
            let ds = toy_dataset(30, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = sample_pair(&ds, m, m, &mut rng, false).unwrap();
            let mut uniq = pair.batch1.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), m);
            for (&i, &y) in pair.batch1.indices.iter().zip(&pair.batch1.labels) {
                prop_assert_eq!(ds.labels[i], y);
            }
        }
    }
}
