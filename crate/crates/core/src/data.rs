//! IDX (MNIST-family) ingestion, a synthetic stand-in dataset, and batching.
//!
//! IDX files are big-endian: a 4-byte magic (`0x00000803` for u8 image
//! tensors, `0x00000801` for u8 label vectors), one 4-byte size per dimension,
//! then the raw bytes. Gzip-wrapped files are detected by their `1F 8B` prefix.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Canonical file names of the two datasets, `(images, labels)` per split.
pub const MNIST_TRAIN: (&str, &str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
pub const MNIST_TEST: (&str, &str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One flattened image per row, pixels in `[0, 1]`.
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub name: String,
    pub split: String,
}

fn magic_name(m: u32) -> &'static str {
    match m {
        IMAGE_MAGIC => "image magic 0x00000803",
        LABEL_MAGIC => "label magic 0x00000801",
        _ => "unknown magic",
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(bytes: &[u8], expected: u32, dims: usize, path: &Path) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < header_len {
        return Err(Error::format(
            path,
            format!("truncated header: expected {header_len} bytes, found {}", bytes.len()),
        ));
    }
    let magic = be_u32(bytes, 0);
    if magic != expected {
        return Err(Error::format(
            path,
            format!(
                "bad magic: expected {:#010x} ({}), found {magic:#010x} ({})",
                expected,
                magic_name(expected),
                magic_name(magic)
            ),
        ));
    }
    Ok((0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect())
}

/// Parses an in-memory IDX image tensor into an `N×(rows·cols)` matrix scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let dims = check_header(bytes, IMAGE_MAGIC, 3, path)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = rows * cols;
    let expected = n * pixels;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload size mismatch: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::new(n, pixels, data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let dims = check_header(bytes, LABEL_MAGIC, 1, path)?;
    let n = dims[0];
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("payload size mismatch: expected {n} bytes, found {}", payload.len()),
        ));
    }
    payload
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if usize::from(b) < NUM_CLASSES {
                Ok(usize::from(b))
            } else {
                Err(Error::format(path, format!("label {b} at index {i} is not a class in [0, 10)")))
            }
        })
        .collect()
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    parse_idx_images(&read_bytes(path)?, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    parse_idx_labels(&read_bytes(path)?, path)
}

/// Encodes pixels in `[0, 1]` back to IDX bytes. Square images are assumed
/// when `rows·cols` is a perfect square, otherwise a single row per image.
pub fn encode_idx_images(images: &Matrix) -> Result<Vec<u8>> {
    let pixels = images.cols();
    let side = (pixels as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == pixels { (side, side) } else { (1, pixels) };
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [images.rows(), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in images.as_slice() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("pixel {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l >= NUM_CLASSES {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        out.push(l as u8);
    }
    Ok(out)
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, name: impl Into<String>, split: impl Into<String>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "image count {} does not match label count {}",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        if images.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
            split: split.into(),
        })
    }

    pub fn load(
        images: impl AsRef<Path>,
        labels: impl AsRef<Path>,
        name: impl Into<String>,
        split: impl Into<String>,
    ) -> Result<Self> {
        Self::new(load_idx_images(images)?, load_idx_labels(labels)?, name, split)
    }

    /// Loads `<dir>/<canonical image file>[.gz]` and its label file.
    pub fn load_dir(dir: impl AsRef<Path>, files: (&str, &str), name: &str, split: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let pick = |stem: &str| {
            let plain = dir.join(stem);
            if plain.exists() {
                plain
            } else {
                dir.join(format!("{stem}.gz"))
            }
        };
        Self::load(pick(files.0), pick(files.1), name, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// Inputs for `idx` as a `d×batch` column matrix, plus their labels.
    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let x = self.images.select_rows(idx).transpose();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (x, labels)
    }

    /// Relabels every sample through `perm` (`new = perm[old]`), which must
    /// be a permutation of `0..perm.len()` covering every label.
    pub fn permute_labels(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        let is_perm = perm.len() <= NUM_CLASSES
            && perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true));
        if !is_perm || self.labels.iter().any(|&l| l >= perm.len()) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of the dataset's classes")));
        }
        Ok(Self {
            images: self.images.clone(),
            labels: self.labels.iter().map(|&l| perm[l]).collect(),
            name: format!("{}-permuted", self.name),
            split: self.split.clone(),
        })
    }

    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Self {
            images: self.images.select_rows(&idx),
            labels: self.labels[..idx.len()].to_vec(),
            name: self.name.clone(),
            split: self.split.clone(),
        }
    }
}

pub const SYNTH_SIGNAL: f64 = 0.04;
pub const SYNTH_NOISE: f64 = 0.3;

/// Class-conditional Gaussian data: ten fixed random prototypes with unit
/// per-pixel RMS; each sample is
/// `clip(0.5 + SYNTH_SIGNAL·prototype + SYNTH_NOISE·noise, 0, 1)`.
///
/// At `d = 784` the nearest-mean classifier is right about 95% of the time,
/// so the task is learnable without being saturated.
///
/// Prototypes depend only on `seed`; `split` selects an independent sample
/// stream so train and test share prototypes but not samples. Labels cycle
/// through the classes so every class count is within one of `n/classes`.
pub fn synthetic_split(seed: u64, split: u64, n_samples: usize, d: usize, classes: usize) -> Result<Dataset> {
    if classes == 0 || classes > NUM_CLASSES {
        return Err(Error::invalid(format!("classes must be in 1..=10, got {classes}")));
    }
    if n_samples < classes {
        return Err(Error::invalid(format!("need at least {classes} samples, got {n_samples}")));
    }
    let mut proto_rng = Rng::child(seed, 0);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| proto_rng.normal()).collect();
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / d as f64).sqrt();
            v.into_iter().map(|x| x / rms).collect()
        })
        .collect();
    let mut rng = Rng::child(seed, 1 + split);
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n_samples * d);
    for &l in &labels {
        for &p in &prototypes[l] {
            data.push((0.5 + SYNTH_SIGNAL * p + SYNTH_NOISE * rng.normal()).clamp(0.0, 1.0));
        }
    }
    let split_name = match split {
        0 => "train".to_string(),
        1 => "test".to_string(),
        s => format!("split{s}"),
    };
    Dataset::new(Matrix::new(n_samples, d, data)?, labels, format!("synthetic-{seed}"), split_name)
}

pub fn synthetic_dataset(seed: u64, n_samples: usize, d: usize, classes: usize) -> Result<Dataset> {
    synthetic_split(seed, 0, n_samples, d, classes)
}

/// Seeded mini-batch sampler: a fresh shuffle every epoch, with the final
/// partial batch of an epoch kept.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::invalid(format!("batch size {batch} must be in 1..={n}")));
        }
        Ok(Self {
            n,
            batch,
            rng,
            order: Vec::new(),
            pos: n,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Indices of the next batch, reshuffling at epoch boundaries.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    /// All batches of one epoch.
    pub fn one_epoch(&mut self) -> Vec<Vec<usize>> {
        self.pos = self.n;
        let mut out = vec![self.next_indices()];
        while self.pos < self.n {
            out.push(self.next_indices());
        }
        out
    }
}

/// Iterator over one shuffled epoch of `(X: d×batch, labels)`.
pub fn batch_iterator<'a>(
    dataset: &'a Dataset,
    batch: usize,
    rng: Rng,
) -> Result<impl Iterator<Item = (Matrix, Vec<usize>)> + 'a> {
    let mut sampler = BatchSampler::new(dataset.len(), batch, rng)?;
    let batches = sampler.one_epoch();
    Ok(batches.into_iter().map(move |idx| dataset.batch(&idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn p() -> &'static Path {
        Path::new("<mem>")
    }

    #[test]
    fn single_zero_image() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 0x1c, 0, 0, 0, 0x1c];
        bytes.extend(std::iter::repeat_n(0, 784));
        let m = parse_idx_images(&bytes, p()).unwrap();
        assert_eq!(m.shape(), (1, 784));
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn full_intensity_pixel_is_one() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 1, 2]);
        bytes.extend([0xff, 0x00]);
        let m = parse_idx_images(&bytes, p()).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn label_magic_rejected_by_image_loader() {
        let bytes = header(LABEL_MAGIC, &[0, 0, 0]);
        let msg = parse_idx_images(&bytes, p()).unwrap_err().to_string();
        assert!(msg.contains("0x00000801") && msg.contains("label magic"), "{msg}");
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let mut bytes = header(IMAGE_MAGIC, &[2, 28, 28]);
        bytes.extend(std::iter::repeat_n(7, 1000));
        let msg = parse_idx_images(&bytes, p()).unwrap_err().to_string();
        assert!(msg.contains("1568") && msg.contains("1000"), "{msg}");
    }

    #[test]
    fn labels_parse_and_validate() {
        assert_eq!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3], p()).unwrap(), vec![7, 3]);
        assert!(parse_idx_labels(&header(LABEL_MAGIC, &[0]), p()).unwrap().is_empty());
        assert!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 1, 10], p()).is_err());
    }

    #[test]
    fn count_mismatch_rejected_at_assembly() {
        assert!(Dataset::new(Matrix::zeros(3, 4), vec![1, 2], "x", "train").is_err());
    }

    #[test]
    fn gzip_files_are_detected() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3]).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx_labels(&path).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn synthetic_is_deterministic_and_stratified() {
        let a = synthetic_dataset(3, 105, 20, 10).unwrap();
        let b = synthetic_dataset(3, 105, 20, 10).unwrap();
        assert_eq!(a, b);
        for c in 0..10 {
            let count = a.labels.iter().filter(|&&l| l == c).count();
            assert!((10..=11).contains(&count), "class {c}: {count}");
        }
        assert!(a.images.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let test = synthetic_split(3, 1, 105, 20, 10).unwrap();
        assert_ne!(test.images, a.images);
        assert!(synthetic_dataset(3, 5, 20, 10).is_err());
    }

    #[test]
    fn epoch_is_a_permutation_with_partial_tail() {
        let mut s = BatchSampler::new(65, 64, Rng::seed(1)).unwrap();
        let batches = s.one_epoch();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..65).collect::<Vec<_>>());
        assert!(BatchSampler::new(10, 11, Rng::seed(1)).is_err());
    }

    #[test]
    fn batch_order_is_seeded() {
        let ds = synthetic_dataset(1, 50, 4, 10).unwrap();
        let a: Vec<_> = batch_iterator(&ds, 8, Rng::seed(5)).unwrap().map(|(_, l)| l).collect();
        let b: Vec<_> = batch_iterator(&ds, 8, Rng::seed(5)).unwrap().map(|(_, l)| l).collect();
        assert_eq!(a, b);
        let (x, _) = batch_iterator(&ds, 8, Rng::seed(5)).unwrap().next().unwrap();
        assert_eq!(x.shape(), (4, 8));
    }

    #[test]
    fn permutation_validation() {
        let ds = synthetic_dataset(1, 20, 4, 10).unwrap();
        let perm: Vec<usize> = (0..10).map(|i| (i + 1) % 10).collect();
        let shifted = ds.permute_labels(&perm).unwrap();
        assert_eq!(shifted.labels[0], (ds.labels[0] + 1) % 10);
        assert!(ds.permute_labels(&[0; 10]).is_err());
    }
}
