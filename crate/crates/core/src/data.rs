//! Labeled datasets with features in `[0,1]`: IDX (MNIST) files, Gaussian
//! blobs and seeded splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A validated collection of samples. Every feature lies in `[0,1]`, every
/// label is below `num_classes` and every vector has `input_dim` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    input_dim: usize,
    num_classes: usize,
    /// Image geometry used when writing IDX files; `rows * cols == input_dim`.
    shape: (usize, usize),
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::with_shape(samples, (1, input_dim), num_classes)
    }

    pub fn with_shape(
        samples: Vec<Sample>,
        shape: (usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let input_dim = shape.0 * shape.1;
        if input_dim == 0 {
            return Err(Error::Dataset("input dimension must be positive".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != input_dim {
                return Err(Error::Dataset(format!(
                    "sample {i} has {} features, expected {input_dim}",
                    s.features.len()
                )));
            }
            if s.label >= num_classes {
                return Err(Error::Dataset(format!(
                    "sample {i} has label {} but there are {num_classes} classes",
                    s.label
                )));
            }
            if let Some(v) = s.features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Dataset(format!(
                    "sample {i} has feature {v} outside [0,1]"
                )));
            }
        }
        Ok(Self {
            samples,
            input_dim,
            num_classes,
            shape,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Same samples, declared over a wider label space (e.g. a subset of
    /// MNIST that happens to miss a digit).
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::Dataset(format!(
                "cannot shrink label space from {} to {num_classes}",
                self.num_classes
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        self.subset(self.samples.iter().take(n).cloned().collect())
    }

    fn subset(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            samples,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            shape: self.shape,
        }
    }
}

/// Reads an IDX image file and its IDX label file. Pixels are scaled to
/// `[0,1]` by dividing by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut reader = IdxReader::new(images_path, &bytes);
    reader.expect_magic(IDX_IMAGES_MAGIC)?;
    let count = reader.u32()? as usize;
    let rows = reader.u32()? as usize;
    let cols = reader.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Header {
            path: images_path.into(),
            offset: 8,
            reason: format!("image dimensions {rows}x{cols} must be positive"),
        });
    }
    let pixels = reader.payload(count as u64 * (rows * cols) as u64)?;
    reader.expect_end()?;

    let bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut reader = IdxReader::new(labels_path, &bytes);
    reader.expect_magic(IDX_LABELS_MAGIC)?;
    let label_count = reader.u32()? as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images_path: images_path.into(),
            labels_path: labels_path.into(),
            images: count,
            labels: label_count,
        });
    }
    let labels = reader.payload(label_count as u64)?;
    reader.expect_end()?;

    let dim = rows * cols;
    let samples: Vec<Sample> = pixels
        .chunks_exact(dim)
        .zip(labels)
        .map(|(px, &label)| Sample {
            features: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label: usize::from(label),
        })
        .collect();
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(1);
    Dataset::with_shape(samples, (rows, cols), num_classes)
}

/// Writes big-endian IDX files. Features are quantized with `round(v·255)`.
pub fn save_idx(
    data: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let count = u32::try_from(data.len())
        .map_err(|_| Error::Argument("too many samples for an IDX file".into()))?;
    let (rows, cols) = data.shape();
    let labels = data
        .samples()
        .iter()
        .map(|s| {
            u8::try_from(s.label)
                .map_err(|_| Error::Argument(format!("label {} does not fit in a byte", s.label)))
        })
        .collect::<Result<Vec<u8>>>()?;

    let mut out = Vec::with_capacity(16 + data.len() * data.input_dim());
    for v in [IDX_IMAGES_MAGIC, count, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for s in data.samples() {
        out.extend(s.features.iter().map(|&v| (v * 255.0).round() as u8));
    }
    fs::write(images_path, &out).map_err(|e| Error::io(images_path, e))?;

    let mut out = Vec::with_capacity(8 + data.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&count.to_be_bytes());
    out.extend_from_slice(&labels);
    fs::write(labels_path, &out).map_err(|e| Error::io(labels_path, e))
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            offset: 0,
        }
    }

    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let available = (self.bytes.len() - self.offset) as u64;
        if n > available {
            return Err(Error::Truncated {
                path: self.path.into(),
                offset: self.bytes.len() as u64,
                needed: n - available,
            });
        }
        let n = n as usize;
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Checks the magic, which also fixes the element type (`0x08`, u8) and
    /// the rank the header must declare.
    fn expect_magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.into(),
                expected,
                found,
            });
        }
        Ok(())
    }

    fn payload(&mut self, n: u64) -> Result<&'a [u8]> {
        self.take(n)
    }

    fn expect_end(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Header {
                path: self.path.into(),
                offset: self.offset as u64,
                reason: format!(
                    "{} trailing bytes after the declared payload",
                    self.bytes.len() - self.offset
                ),
            });
        }
        Ok(())
    }
}

/// Parameters for [`make_blobs`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of each coordinate around its class center.
    pub spread: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            dim,
            spread,
            seed,
        }
    }
}

/// Isotropic Gaussian clusters around seeded class centers in
/// `[0.2, 0.8]^dim`, clipped to `[0,1]`. Samples are grouped by class.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::Argument(
            "blob classes, samples per class and dimension must be positive".into(),
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::Argument(format!(
            "blob spread must be finite and non-negative, got {}",
            spec.spread
        )));
    }
    let mut rng = seed::rng(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.spread).expect("spread validated above");
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let features = center
                .iter()
                .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            samples.push(Sample { features, label });
        }
    }
    Dataset::new(samples, spec.dim, spec.num_classes)
}

/// Shuffled partition into `⌈fraction·n⌉` and the remaining samples.
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must lie in (0,1), got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let head = seed::ceil_fraction(data.len(), fraction);
    let pick = |idx: &[usize]| data.subset(idx.iter().map(|&i| data.samples[i].clone()).collect());
    Ok((pick(&order[..head]), pick(&order[head..])))
}

/// Seeded shuffle of the whole dataset.
pub fn shuffled(data: &Dataset, seed: u64) -> Dataset {
    let mut samples = data.samples.clone();
    samples.shuffle(&mut seed::rng(seed));
    data.subset(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, bytes: &[u8]) {
        fs::write(path, bytes).unwrap();
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    #[test]
    fn parses_hand_written_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let mut bytes = header(IDX_IMAGES_MAGIC, &[2, 2, 2]);
        bytes.extend_from_slice(&[0, 255, 255, 0, 255, 0, 0, 255]);
        write(&img, &bytes);
        let mut bytes = header(IDX_LABELS_MAGIC, &[2]);
        bytes.extend_from_slice(&[3, 7]);
        write(&lbl, &bytes);

        let data = load_idx(&img, &lbl).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.shape(), (2, 2));
        assert_eq!(data.samples()[0].features, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(data.samples()[1].label, 7);
        assert_eq!(data.num_classes(), 8);
    }

    #[test]
    fn labels_with_image_magic_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let mut bytes = header(IDX_IMAGES_MAGIC, &[1, 1, 1]);
        bytes.push(9);
        write(&img, &bytes);
        let mut bytes = header(IDX_IMAGES_MAGIC, &[1]);
        bytes.push(0);
        write(&lbl, &bytes);
        match load_idx(&img, &lbl).unwrap_err() {
            Error::BadMagic { path, found, .. } => {
                assert_eq!(path, lbl);
                assert_eq!(found, IDX_IMAGES_MAGIC);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let mut bytes = header(IDX_IMAGES_MAGIC, &[2, 2, 2]);
        bytes.extend_from_slice(&[1, 2, 3]);
        write(&img, &bytes);
        write(&lbl, &header(IDX_LABELS_MAGIC, &[2]));
        match load_idx(&img, &lbl).unwrap_err() {
            Error::Truncated { path, offset, needed } => {
                assert_eq!(path, img);
                assert_eq!(offset, 19);
                assert_eq!(needed, 5);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let mut bytes = header(IDX_IMAGES_MAGIC, &[1, 1, 1]);
        bytes.push(0);
        write(&img, &bytes);
        let mut bytes = header(IDX_LABELS_MAGIC, &[2]);
        bytes.extend_from_slice(&[0, 1]);
        write(&lbl, &bytes);
        assert!(matches!(
            load_idx(&img, &lbl).unwrap_err(),
            Error::CountMismatch { images: 1, labels: 2, .. }
        ));
    }

    #[test]
    fn empty_dataset_writes_zero_count_headers() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let data = Dataset::with_shape(vec![], (28, 28), 10).unwrap();
        save_idx(&data, &img, &lbl).unwrap();
        assert_eq!(fs::read(&img).unwrap(), header(IDX_IMAGES_MAGIC, &[0, 28, 28]));
        assert_eq!(fs::read(&lbl).unwrap(), header(IDX_LABELS_MAGIC, &[0]));
    }

    #[test]
    fn one_mnist_image_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let sample = Sample {
            features: vec![0.5; 784],
            label: 4,
        };
        let data = Dataset::with_shape(vec![sample], (28, 28), 10).unwrap();
        save_idx(&data, &img, &lbl).unwrap();
        assert_eq!(fs::metadata(&img).unwrap().len(), 16 + 784);
        assert_eq!(fs::metadata(&lbl).unwrap().len(), 8 + 1);
    }

    #[test]
    fn round_trip_is_identity_up_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let data = make_blobs(&BlobSpec::new(3, 5, 6, 0.2, 1)).unwrap();
        save_idx(&data, &img, &lbl).unwrap();
        let back = load_idx(&img, &lbl).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.samples().iter().zip(back.samples()) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        // Quantized data survives a second trip bit-for-bit.
        save_idx(&back, &img, &lbl).unwrap();
        assert_eq!(load_idx(&img, &lbl).unwrap(), back);
    }

    #[test]
    fn zero_spread_puts_points_on_centers() {
        let data = make_blobs(&BlobSpec::new(2, 4, 3, 0.0, 9)).unwrap();
        for class in 0..2 {
            let points: Vec<_> = data.samples().iter().filter(|s| s.label == class).collect();
            assert!(points.iter().all(|p| p.features == points[0].features));
        }
    }

    #[test]
    fn blobs_are_seed_deterministic() {
        let spec = BlobSpec::new(3, 10, 4, 0.1, 42);
        assert_eq!(make_blobs(&spec).unwrap(), make_blobs(&spec).unwrap());
    }

    #[test]
    fn split_sizes_and_partition() {
        let data = make_blobs(&BlobSpec::new(2, 5, 2, 0.1, 3)).unwrap();
        let (a, b) = split(&data, 0.8, 6).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut union: Vec<_> = a.samples().iter().chain(b.samples()).cloned().collect();
        let mut orig = data.samples().to_vec();
        let key = |s: &Sample| (s.label, s.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        union.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(union, orig);
        assert_eq!(split(&data, 0.8, 6).unwrap(), (a, b));
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let data = make_blobs(&BlobSpec::new(2, 5, 2, 0.1, 3)).unwrap();
        assert!(split(&data, 0.0, 1).is_err());
        assert!(split(&data, 1.0, 1).is_err());
    }

    #[test]
    fn dataset_invariants_are_checked() {
        let bad_range = Sample {
            features: vec![1.5],
            label: 0,
        };
        assert!(Dataset::new(vec![bad_range], 1, 1).is_err());
        let bad_label = Sample {
            features: vec![0.5],
            label: 3,
        };
        assert!(Dataset::new(vec![bad_label], 1, 2).is_err());
    }
}
