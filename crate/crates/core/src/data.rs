//! Dataset loading: MNIST IDX files and the CIFAR-10 binary format, plus a
//! seeded shuffling batch iterator. Pixels are normalized to [0, 1] at load
//! time and stored as f32; batches convert to the training precision on
//! demand.

use std::fs::File;
use std::io::{BufReader, Read as _};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GhnError, Result};
use crate::real::{lit, Real};
use crate::tensor::TensorData;

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
const CIFAR_RECORD_LEN: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels

/// An in-memory labelled image set, channels-last.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// [n, h, w, c] pixel values in [0, 1].
    pub images: TensorData<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Materialize the given sample indices as one batch in precision `F`.
    pub fn gather<F: Real>(&self, indices: &[usize]) -> Result<Batch<F>> {
        let (h, w, c) = self.image_shape();
        let px = h * w * c;
        let src = self.images.values();
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(GhnError::InvalidArgument(format!(
                    "sample index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend(src[i * px..(i + 1) * px].iter().map(|&v| lit::<F>(v as f64)));
            labels.push(self.labels[i]);
        }
        Ok(Batch {
            images: TensorData::new(vec![indices.len(), h, w, c], data)?,
            labels,
        })
    }
}

/// One batch ready to enter the tape.
#[derive(Debug, Clone)]
pub struct Batch<F: Real> {
    pub images: TensorData<F>,
    pub labels: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_exact_or(reader: &mut impl std::io::Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|_| {
        GhnError::DataFormat(format!("truncated {what}: fewer bytes than the header promises"))
    })
}

/// Load an MNIST-style IDX image/label file pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = ir.read_u32::<BigEndian>().map_err(|_| {
        GhnError::DataFormat(format!("{}: file too short for an IDX header", images_path.display()))
    })?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GhnError::DataFormat(format!(
            "{}: bad magic {magic}, expected {IDX_IMAGES_MAGIC} (IDX images)",
            images_path.display()
        )));
    }
    let n = ir.read_u32::<BigEndian>().map_err(io_short(images_path))? as usize;
    let h = ir.read_u32::<BigEndian>().map_err(io_short(images_path))? as usize;
    let w = ir.read_u32::<BigEndian>().map_err(io_short(images_path))? as usize;
    let mut raw = vec![0u8; n * h * w];
    read_exact_or(&mut ir, &mut raw, "IDX image data")?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = lr.read_u32::<BigEndian>().map_err(io_short(labels_path))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GhnError::DataFormat(format!(
            "{}: bad magic {magic}, expected {IDX_LABELS_MAGIC} (IDX labels)",
            labels_path.display()
        )));
    }
    let ln = lr.read_u32::<BigEndian>().map_err(io_short(labels_path))? as usize;
    if ln != n {
        return Err(GhnError::DataFormat(format!(
            "image count {n} does not match label count {ln}"
        )));
    }
    let mut label_bytes = vec![0u8; ln];
    read_exact_or(&mut lr, &mut label_bytes, "IDX label data")?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(GhnError::DataFormat(format!("label {bad} out of range 0..=9")));
    }

    let images = TensorData::new(
        vec![n, h, w, 1],
        raw.iter().map(|&b| b as f32 / 255.0).collect(),
    )?;
    Ok(Dataset {
        images,
        labels,
        classes: 10,
    })
}

fn io_short(path: &Path) -> impl Fn(std::io::Error) -> GhnError + '_ {
    move |_| GhnError::DataFormat(format!("{}: file too short for an IDX header", path.display()))
}

/// Load one or more CIFAR-10 binary batch files (3073-byte records, pixels
/// stored plane by plane). Output is channels-last [n, 32, 32, 3].
pub fn load_cifar10(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(GhnError::InvalidArgument("no CIFAR-10 batch files given".into()));
    }
    let mut pixels: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let mut raw = Vec::new();
        File::open(path)?.read_to_end(&mut raw)?;
        if raw.is_empty() || raw.len() % CIFAR_RECORD_LEN != 0 {
            return Err(GhnError::DataFormat(format!(
                "{}: length {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record size",
                path.display(),
                raw.len()
            )));
        }
        for record in raw.chunks_exact(CIFAR_RECORD_LEN) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(GhnError::DataFormat(format!(
                    "{}: label {label} out of range 0..=9",
                    path.display()
                )));
            }
            labels.push(label);
            let planes = &record[1..];
            // plane order r, g, b -> interleave to [h, w, c]
            for i in 0..1024 {
                pixels.push(planes[i] as f32 / 255.0);
                pixels.push(planes[1024 + i] as f32 / 255.0);
                pixels.push(planes[2048 + i] as f32 / 255.0);
            }
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: TensorData::new(vec![n, 32, 32, 3], pixels)?,
        labels,
        classes: 10,
    })
}

/// Iterator over index batches for one epoch. With `shuffle` the permutation
/// is drawn from a ChaCha stream keyed on (seed, epoch), so a fixed seed
/// reproduces the exact batch sequence. The final batch may be short.
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchIter {
    pub fn new(
        n: usize,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        shuffle: bool,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(GhnError::InvalidArgument("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
            order.shuffle(&mut rng);
        }
        Ok(BatchIter {
            order,
            batch_size,
            cursor: 0,
        })
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(chunk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::{BigEndian, WriteBytesExt};
    use std::io::Write as _;

    fn write_idx_pair(
        dir: &Path,
        n: u32,
        h: u32,
        w: u32,
        pixels: &[u8],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        let mut f = File::create(&ip).unwrap();
        f.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
        f.write_u32::<BigEndian>(n).unwrap();
        f.write_u32::<BigEndian>(h).unwrap();
        f.write_u32::<BigEndian>(w).unwrap();
        f.write_all(pixels).unwrap();
        let mut f = File::create(&lp).unwrap();
        f.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        f.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 20) as u8).collect();
        let (ip, lp) = write_idx_pair(dir.path(), 2, 3, 3, &pixels, &[7, 2]);
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), (3, 3, 1));
        assert_eq!(ds.labels, vec![7, 2]);
        assert!((ds.images.values()[1] - 20.0 / 255.0).abs() < 1e-7);
        assert_eq!(ds.images.values()[0], 0.0);
    }

    #[test]
    fn idx_error_cases() {
        let dir = tempfile::tempdir().unwrap();
        // wrong magic
        let ip = dir.path().join("bad.idx");
        let mut f = File::create(&ip).unwrap();
        f.write_u32::<BigEndian>(1234).unwrap();
        f.write_u32::<BigEndian>(0).unwrap();
        f.write_u32::<BigEndian>(0).unwrap();
        f.write_u32::<BigEndian>(0).unwrap();
        let (_, lp) = write_idx_pair(dir.path(), 0, 0, 0, &[], &[]);
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        // truncated pixel payload
        let (ip, lp) = write_idx_pair(dir.path(), 2, 3, 3, &[0u8; 10], &[1, 2]);
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // count mismatch
        let (ip, lp) = write_idx_pair(dir.path(), 1, 2, 2, &[0u8; 4], &[1, 2]);
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    #[test]
    fn cifar_round_trip_and_channel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // one all-red image: r plane 255, g and b planes 0, label 3
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 3;
        for p in rec[1..1025].iter_mut() {
            *p = 255;
        }
        File::create(&path).unwrap().write_all(&rec).unwrap();
        let ds = load_cifar10(&[&path]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.image_shape(), (32, 32, 3));
        assert_eq!(ds.labels, vec![3]);
        // channels-last: every [.., 0] is 1.0, the rest 0
        for px in ds.images.values().chunks_exact(3) {
            assert_eq!(px, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn cifar_error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        File::create(&path).unwrap().write_all(&[0u8; 100]).unwrap();
        let err = load_cifar10(&[&path]).unwrap_err();
        assert!(err.to_string().contains("record size"), "{err}");

        let path = dir.path().join("badlabel.bin");
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 11;
        File::create(&path).unwrap().write_all(&rec).unwrap();
        let err = load_cifar10(&[&path]).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn batch_iter_covers_every_index_once() {
        let batches: Vec<Vec<usize>> = BatchIter::new(10, 3, 42, 0, true).unwrap().collect();
        assert_eq!(batches.len(), 4);
        assert_eq!(batches[3].len(), 1); // short final batch
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_iter_is_seed_deterministic_and_epoch_varying() {
        let a: Vec<Vec<usize>> = BatchIter::new(32, 8, 7, 0, true).unwrap().collect();
        let b: Vec<Vec<usize>> = BatchIter::new(32, 8, 7, 0, true).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<Vec<usize>> = BatchIter::new(32, 8, 7, 1, true).unwrap().collect();
        assert_ne!(a, c);
        let d: Vec<Vec<usize>> = BatchIter::new(32, 8, 8, 0, true).unwrap().collect();
        assert_ne!(a, d);
    }

    #[test]
    fn batch_iter_unshuffled_preserves_order() {
        let batches: Vec<Vec<usize>> = BatchIter::new(5, 2, 0, 0, false).unwrap().collect();
        assert_eq!(batches, vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert!(BatchIter::new(5, 0, 0, 0, false).is_err());
    }

    #[test]
    fn gather_converts_precision_and_validates() {
        let ds = Dataset {
            images: TensorData::new(vec![2, 1, 1, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap(),
            labels: vec![0, 1],
            classes: 2,
        };
        let b: Batch<f64> = ds.gather(&[1, 0]).unwrap();
        assert_eq!(b.images.shape(), &[2, 1, 1, 2]);
        assert!((b.images.values()[0] - 0.3f32 as f64).abs() < 1e-12);
        assert_eq!(b.labels, vec![1, 0]);
        assert!(ds.gather::<f32>(&[5]).is_err());
    }
}
