//! Datasets: IDX ingestion, class holdout and synthetic fixtures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images as rows of a matrix with pixels in `[0, 1]`, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
    shape: (usize, usize),
    split: Split,
    tag: String,
}

impl Dataset {
    pub fn new(
        images: Matrix,
        labels: Vec<usize>,
        n_classes: usize,
        split: Split,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::ClassIndex { index: bad, n_classes });
        }
        if images.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        let dim = images.cols();
        Ok(Dataset {
            images,
            labels,
            n_classes,
            shape: (1, dim),
            split,
            tag: tag.into(),
        })
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

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    #[inline]
    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The first `n` items (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    fn select(&self, keep: &[usize]) -> Dataset {
        let dim = self.dim();
        let mut data = Vec::with_capacity(keep.len() * dim);
        for &i in keep {
            data.extend_from_slice(self.image(i));
        }
        Dataset {
            images: Matrix::from_vec(keep.len(), dim, data).expect("rows copied from a valid matrix"),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            shape: self.shape,
            split: self.split,
            tag: self.tag.clone(),
        }
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Truncated {
            context: "idx file",
            what,
        })
}

/// Loads an IDX image/label pair; files ending in `.gz` are decompressed.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
    tag: &str,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_all(ip)?;
    let lab = read_all(lp)?;

    let magic = be_u32(&img, 0, "images header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: ip.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = be_u32(&lab, 0, "labels header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: lp.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_img = be_u32(&img, 4, "images header")? as usize;
    let rows = be_u32(&img, 8, "images header")? as usize;
    let cols = be_u32(&img, 12, "images header")? as usize;
    let n_lab = be_u32(&lab, 4, "labels header")? as usize;
    if n_img != n_lab {
        return Err(Error::IdxCountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let dim = rows * cols;
    let pixels = img.get(16..16 + n_img * dim).ok_or(Error::Truncated {
        context: "idx file",
        what: "image pixels",
    })?;
    let labels = lab.get(8..8 + n_lab).ok_or(Error::Truncated {
        context: "idx file",
        what: "labels",
    })?;
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = Dataset::new(Matrix::from_vec(n_img, dim, data)?, labels, n_classes, split, tag)?;
    ds.shape = (rows, cols);
    Ok(ds)
}

/// Writes a dataset back to IDX (uncompressed). Pixels are re-quantized to
/// bytes, which is lossless for data that came from [`load_idx`].
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (rows, cols) = ds.shape;
    let mut w = BufWriter::new(File::create(ip).map_err(|e| Error::io(ip, e))?);
    let mut header = Vec::with_capacity(16);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        header.extend_from_slice(&v.to_be_bytes());
    }
    let pixels: Vec<u8> = ds.images.as_slice().iter().map(|p| (p * 255.0).round() as u8).collect();
    w.write_all(&header)
        .and_then(|_| w.write_all(&pixels))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(ip, e))?;

    let mut w = BufWriter::new(File::create(lp).map_err(|e| Error::io(lp, e))?);
    let mut bytes = Vec::with_capacity(8 + ds.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    bytes.extend(ds.labels.iter().map(|&l| l as u8));
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(lp, e))
}

/// Image and label paths of one split inside a dataset directory:
/// `{train,t10k}-{images-idx3,labels-idx1}-ubyte`, or the `.gz` variant when
/// only that one exists.
pub fn idx_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |stem: String| {
        let plain = dir.join(&stem);
        let gz = dir.join(format!("{stem}.gz"));
        if plain.exists() || !gz.exists() {
            plain
        } else {
            gz
        }
    };
    (
        find(format!("{prefix}-images-idx3-ubyte")),
        find(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads one split of a dataset directory laid out as in [`idx_paths`].
pub fn load_idx_dir(dir: impl AsRef<Path>, split: Split, tag: &str) -> Result<Dataset> {
    let (images, labels) = idx_paths(dir, split);
    load_idx(images, labels, split, tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub class_index: usize,
    pub removal_fraction: f64,
    pub seed: u64,
}

/// Removes `floor(fraction * count)` uniformly chosen items of one class from
/// a training set. Survivors keep their order.
pub fn apply_holdout(ds: &Dataset, spec: &HoldoutSpec) -> Result<Dataset> {
    if ds.split != Split::Train {
        return Err(Error::Dataset("holdout applies to training data only".into()));
    }
    if spec.class_index >= ds.n_classes {
        return Err(Error::ClassIndex {
            index: spec.class_index,
            n_classes: ds.n_classes,
        });
    }
    if !(0.0..=1.0).contains(&spec.removal_fraction) {
        return Err(Error::Config(format!(
            "removal fraction {} outside [0, 1]",
            spec.removal_fraction
        )));
    }
    let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == spec.class_index).collect();
    let remove = (spec.removal_fraction * members.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut drop = vec![false; ds.len()];
    for j in index::sample(&mut rng, members.len(), remove) {
        drop[members[j]] = true;
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| !drop[i]).collect();
    Ok(ds.select(&keep))
}

/// Gaussian clusters (sigma 0.1) around random centers
/// `0.5 + separation * (u - 0.5)`, clipped to `[0, 1]`. Class-major order.
pub fn synthetic_blobs(n_classes: usize, dim: usize, n_per_class: usize, separation: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| 0.5 + separation * (rng.gen::<f64>() - 0.5)).collect())
        .collect();
    let mut data = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(center.iter().map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    let images = Matrix::from_vec(labels.len(), dim, data).expect("finite by construction");
    Dataset::new(images, labels, n_classes, Split::Train, "synthetic").expect("valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, bytes: &[u8]) {
        std::fs::write(path, bytes).unwrap();
    }

    fn tiny_idx(dir: &Path, n_img: u32, n_lab: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n_img, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n_img * 4).map(|i| (i * 17 % 256) as u8));
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, n_lab] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend((0..n_lab).map(|i| (i % 3) as u8));
        write_raw(&ip, &img);
        write_raw(&lp, &lab);
        (ip, lp)
    }

    #[test]
    fn loads_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path(), 5, 5);
        let ds = load_idx(&ip, &lp, Split::Train, "tiny").unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.n_classes()), (5, 4, 3));
        assert_eq!(ds.image(1)[0], 68.0 / 255.0);
        let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path(), 3, 3);
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::fast());
        enc.write_all(&std::fs::read(&ip).unwrap()).unwrap();
        enc.finish().unwrap();
        assert_eq!(
            load_idx(&gz, &lp, Split::Test, "t").unwrap(),
            load_idx(&ip, &lp, Split::Test, "t").unwrap()
        );
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path(), 4, 3);
        match load_idx(&ip, &lp, Split::Train, "x") {
            Err(Error::IdxCountMismatch { images: 4, labels: 3 }) => {}
            other => panic!("{other:?}"),
        }
        let msg = load_idx(&ip, &lp, Split::Train, "x").unwrap_err().to_string();
        assert!(msg.contains('4') && msg.contains('3'));

        let empty = dir.path().join("empty");
        write_raw(&empty, &[]);
        assert!(matches!(
            load_idx(&empty, &lp, Split::Train, "x"),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            load_idx(&lp, &lp, Split::Train, "x"),
            Err(Error::IdxMagic { .. })
        ));

        let (ip, lp) = tiny_idx(dir.path(), 3, 3);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 1);
        write_raw(&ip, &bytes);
        assert!(matches!(
            load_idx(&ip, &lp, Split::Train, "x"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn holdout_counts_and_order() {
        let ds = synthetic_blobs(3, 2, 101, 0.5, 1);
        let spec = |f: f64| HoldoutSpec {
            class_index: 1,
            removal_fraction: f,
            seed: 7,
        };
        assert_eq!(apply_holdout(&ds, &spec(0.0)).unwrap(), ds);
        let none = apply_holdout(&ds, &spec(1.0)).unwrap();
        assert_eq!(none.class_counts(), vec![101, 0, 101]);
        let most = apply_holdout(&ds, &spec(0.9)).unwrap();
        // floor(0.9 * 101) = 90 removed
        assert_eq!(most.class_counts(), vec![101, 11, 101]);
        assert_eq!(most, apply_holdout(&ds, &spec(0.9)).unwrap());
        assert_ne!(most, apply_holdout(&ds, &HoldoutSpec { seed: 8, ..spec(0.9) }).unwrap());
        // other classes untouched and in order
        assert_eq!(&most.labels()[..101], &ds.labels()[..101]);
        assert_eq!(most.image(0), ds.image(0));
        assert!(apply_holdout(
            &ds,
            &HoldoutSpec {
                class_index: 3,
                ..spec(0.5)
            }
        )
        .is_err());
    }

    #[test]
    fn holdout_rejects_test_split() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path(), 3, 3);
        let test = load_idx(&ip, &lp, Split::Test, "t").unwrap();
        let spec = HoldoutSpec {
            class_index: 0,
            removal_fraction: 0.5,
            seed: 0,
        };
        assert!(apply_holdout(&test, &spec).is_err());
    }

    #[test]
    fn blobs_are_seeded_and_balanced() {
        let a = synthetic_blobs(4, 5, 30, 0.8, 11);
        assert_eq!(a, synthetic_blobs(4, 5, 30, 0.8, 11));
        assert_eq!(a.class_counts(), vec![30; 4]);
        assert!(a.images().as_slice().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
