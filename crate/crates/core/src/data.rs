//! Datasets: IDX ingestion, pixel scrambling and stratified subsets.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{ArrayView2, ArrayView1};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::seed::rng_from;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxFile {
    Images,
    Labels,
}

impl fmt::Display for IdxFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IdxFile::Images => "images",
            IdxFile::Labels => "labels",
        })
    }
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wrong magic in {file} file: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { file: IdxFile, expected: u32, found: u32 },
    #[error("truncated {file} file: {field} needs {expected} bytes, only {actual} present")]
    Truncated { file: IdxFile, field: &'static str, expected: usize, actual: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("empty {file} file: zero items")]
    Empty { file: IdxFile },
}

/// Images flattened row-major (`N × n`, pixels in `[0, 1]`) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        height: usize,
        width: usize,
        channels: usize,
        classes: usize,
    ) -> Result<Self> {
        let n = height * width * channels;
        if labels.is_empty() || n == 0 {
            return Err(Error::invalid("dataset must hold at least one sample of positive size"));
        }
        if images.len() != labels.len() * n {
            return Err(Error::shape(format!(
                "{} labels of {n} features need {} pixel values, got {}",
                labels.len(),
                labels.len() * n,
                images.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, height, width, channels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features per sample.
    pub fn features(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.features()), &self.images).expect("consistent shape")
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f32> {
        let n = self.features();
        ArrayView1::from(&self.images[i * n..(i + 1) * n])
    }

    /// Rows `indices` as a new dataset, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.features();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range")));
            }
            images.extend_from_slice(&self.images[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        Dataset::new(images, labels, self.height, self.width, self.channels, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> std::result::Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io { path: path.to_path_buf(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, file: IdxFile, field: &'static str) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated { file, field, expected: at + 4, actual: bytes.len() })
}

/// Parses an IDX image file. Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, &[u8]), IdxError> {
    let file = IdxFile::Images;
    let magic = be_u32(bytes, 0, file, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::WrongMagic { file, expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, file, "item count")? as usize;
    let rows = be_u32(bytes, 8, file, "row count")? as usize;
    let cols = be_u32(bytes, 12, file, "column count")? as usize;
    if count == 0 {
        return Err(IdxError::Empty { file });
    }
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(IdxError::Truncated { file, field: "pixels", expected: need, actual: bytes.len() });
    }
    Ok((count, rows, cols, &bytes[16..need]))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<&[u8], IdxError> {
    let file = IdxFile::Labels;
    let magic = be_u32(bytes, 0, file, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::WrongMagic { file, expected: IDX_LABELS_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, file, "item count")? as usize;
    if count == 0 {
        return Err(IdxError::Empty { file });
    }
    let need = 8 + count;
    if bytes.len() < need {
        return Err(IdxError::Truncated { file, field: "labels", expected: need, actual: bytes.len() });
    }
    Ok(&bytes[8..need])
}

/// Builds a dataset from raw IDX bytes; pixels are scaled by `1/255`.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch { images: count, labels: labels.len() }.into());
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    let images = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(images, labels, rows, cols, 1, classes)
}

/// Loads an IDX image/label pair (plain or gzip-compressed). Datasets with
/// labels below 10 report 10 classes.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    dataset_from_idx(&read_file(images)?, &read_file(labels)?)
}

/// Encodes images (`count × rows × cols` bytes) as an IDX image file.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Fixed pixel re-ordering applied identically to every image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
    pub seed: Option<u64>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { mapping: (0..n).collect(), seed: None }
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(&mut rng_from(seed));
        Permutation { mapping, seed: Some(seed) }
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid("mapping is not a bijection"));
            }
        }
        Ok(Permutation { mapping, seed: None })
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn apply_index(&self, j: usize) -> usize {
        self.mapping[j]
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (j, &m) in self.mapping.iter().enumerate() {
            inv[m] = j;
        }
        Permutation { mapping: inv, seed: None }
    }
}

/// Column `j` of the output is column `perm(j)` of the input, for every
/// image. Labels are untouched.
pub fn scramble(dataset: &Dataset, perm: &Permutation) -> Result<Dataset> {
    let n = dataset.features();
    if perm.len() != n {
        return Err(Error::invalid(format!("permutation of size {} for {n} features", perm.len())));
    }
    let mut images = Vec::with_capacity(dataset.images.len());
    for img in dataset.images.chunks(n) {
        images.extend(perm.mapping.iter().map(|&m| img[m]));
    }
    Dataset::new(images, dataset.labels.clone(), dataset.height, dataset.width, dataset.channels, dataset.classes)
}

/// Class-stratified subsample of `count` samples. Each class gets its
/// proportional share (largest remainders first, ties to the lower class);
/// samples within a class are drawn with a seeded shuffle. The result keeps
/// the original sample order.
pub fn subset(dataset: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let total = dataset.len();
    if count == 0 || count > total {
        return Err(Error::invalid(format!("subset size must lie in [1, {total}], got {count}")));
    }
    let counts = dataset.class_counts();
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * count / total).collect();
    let mut remainders: Vec<(usize, usize)> =
        counts.iter().enumerate().map(|(k, &c)| (c * count % total, k)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = count - quota.iter().sum::<usize>();
    for &(_, k) in remainders.iter().filter(|&&(r, _)| r > 0).take(missing) {
        quota[k] += 1;
    }
    let mut rng = rng_from(seed);
    let mut chosen = Vec::with_capacity(count);
    for (k, &q) in quota.iter().enumerate() {
        let mut members: Vec<usize> = (0..total).filter(|&i| dataset.labels[i] == k).collect();
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..q]);
    }
    chosen.sort_unstable();
    dataset.select(&chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::covariance_graph;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        // Two 2x3 images by hand.
        let pixels = [0u8, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 17];
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        images.extend_from_slice(&pixels);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn handwritten_fixture_decodes_exactly() {
        let (images, labels) = fixture();
        let d = dataset_from_idx(&images, &labels).unwrap();
        assert_eq!((d.len(), d.height, d.width, d.features()), (2, 2, 3, 6));
        assert_eq!(d.labels(), &[7, 3]);
        assert_eq!(d.image(0).to_vec(), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(d.image(1)[5], 17.0 / 255.0);
        assert_eq!(encode_idx_images(2, 3, &images[16..]), images);
        assert_eq!(encode_idx_labels(&labels[8..]), labels);
    }

    #[test]
    fn wrong_magic_named() {
        let (images, _) = fixture();
        let err = dataset_from_idx(&images, &images).unwrap_err();
        assert!(err.to_string().contains("wrong magic in labels file"), "{err}");
        let (_, labels) = fixture();
        let err = parse_idx_images(&labels).unwrap_err();
        assert!(matches!(err, IdxError::WrongMagic { file: IdxFile::Images, .. }));
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let (images, labels) = fixture();
        for cut in [0, 3, 10, 20, images.len() - 1] {
            let err = parse_idx_images(&images[..cut]).unwrap_err();
            assert!(matches!(err, IdxError::Truncated { file: IdxFile::Images, .. }), "{cut}: {err}");
        }
        assert!(matches!(parse_idx_labels(&labels[..9]), Err(IdxError::Truncated { field: "labels", .. })));
        let mut one_label = labels.clone();
        one_label[7] = 1;
        one_label.truncate(9);
        let err = dataset_from_idx(&images, &one_label).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::CountMismatch { images: 2, labels: 1 })));
    }

    #[test]
    fn gzip_files_load() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture();
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&images).unwrap();
        fs::write(dir.path().join("img.gz"), enc.finish().unwrap()).unwrap();
        fs::write(dir.path().join("lbl"), &labels).unwrap();
        let d = load_idx(&dir.path().join("img.gz"), &dir.path().join("lbl")).unwrap();
        assert_eq!(d, dataset_from_idx(&images, &labels).unwrap());
        assert!(matches!(
            load_idx(&dir.path().join("missing"), &dir.path().join("lbl")),
            Err(Error::Idx(IdxError::Io { .. }))
        ));
    }

    fn toy(samples: usize, n: usize, classes: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = rng_from(seed);
        let images = (0..samples * n).map(|_| rng.random::<f32>()).collect();
        let labels = (0..samples).map(|i| (i * 7 + i / 3) % classes).collect();
        Dataset::new(images, labels, 1, n, 1, classes).unwrap()
    }

    #[test]
    fn scramble_identity_and_inverse() {
        let d = toy(20, 9, 3, 1);
        assert_eq!(scramble(&d, &Permutation::identity(9)).unwrap(), d);
        let p = Permutation::random(9, 42);
        let s = scramble(&d, &p).unwrap();
        assert_ne!(s, d);
        assert_eq!(s.labels(), d.labels());
        assert_eq!(scramble(&s, &p.inverse()).unwrap(), d);
        assert!(scramble(&d, &Permutation::identity(8)).is_err());
        assert!(Permutation::from_mapping(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn covariance_graph_commutes_with_scramble() {
        let d = toy(40, 8, 2, 3);
        let p = Permutation::random(8, 5);
        let s = scramble(&d, &p).unwrap();
        let g = covariance_graph(d.images(), 0.3).unwrap();
        let gs = covariance_graph(s.images(), 0.3).unwrap();
        assert_eq!(g.nnz(), gs.nnz());
        for (i, j) in gs.edges() {
            assert!(g.contains(p.apply_index(i), p.apply_index(j)));
        }
    }

    #[test]
    fn subset_examples() {
        let d = toy(100, 4, 10, 2);
        assert_eq!(subset(&d, 100, 9).unwrap(), d);
        let one_each = subset(&d, 10, 9).unwrap();
        assert_eq!(one_each.class_counts(), vec![1; 10]);
        assert!(subset(&d, 0, 1).is_err());
        assert!(subset(&d, 101, 1).is_err());
        assert_eq!(subset(&d, 37, 4).unwrap(), subset(&d, 37, 4).unwrap());
    }

    #[test]
    fn subset_is_proportional() {
        // 60 / 30 / 10 split.
        let labels: Vec<usize> = (0..100).map(|i| if i < 60 { 0 } else if i < 90 { 1 } else { 2 }).collect();
        let d = Dataset::new(vec![0.0; 100], labels, 1, 1, 1, 3).unwrap();
        let s = subset(&d, 25, 0).unwrap();
        let direct: Vec<usize> = (0..3).map(|k| s.labels().iter().filter(|&&l| l == k).count()).collect();
        // 15 / 7.5 / 2.5: the two .5 remainders go to the lower classes first.
        assert_eq!(direct, vec![15, 8, 2]);
        assert_eq!(s.class_counts(), direct);
    }
}
