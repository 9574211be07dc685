//! MNIST ingestion in the IDX format (raw or gzip), the deterministic
//! train/validation split, and batch iteration.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::XorShiftRng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASS_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Images in [0,1] with aligned labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor, // [N, 1, R, C]
    pub labels: Vec<u8>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples, in stored order.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let row = self.sample_len();
        Dataset {
            images: Tensor::from_vec(
                {
                    let mut s = self.images.shape().to_vec();
                    s[0] = n;
                    s
                },
                self.images.data()[..n * row].to_vec(),
            )
            .expect("head shape"),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Gather rows by index into a new (images, labels) pair.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let row = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::from_vec(shape, data).expect("gather shape"), labels)
    }
}

/// Read a whole file, transparently gunzipping if it starts with the gzip
/// magic bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated file: need {end} bytes for u32 at offset {offset}"),
        ));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load an IDX image file into a [N, 1, R, C] tensor of values in [0,1].
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_maybe_gz(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic 0x{magic:08x}, want 0x{IMAGES_MAGIC:08x}")));
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated image file: need {need} bytes, have {}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(vec![n, 1, rows, cols], data)
}

/// Load an IDX label file; every label must be in [0,10).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic 0x{magic:08x}, want 0x{LABELS_MAGIC:08x}")));
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated label file: need {need} bytes, have {}", bytes.len()),
        ));
    }
    for (i, &b) in bytes[8..need].iter().enumerate() {
        if b as usize >= CLASS_COUNT {
            return Err(Error::format(
                (8 + i) as u64,
                format!("label byte {b} out of range [0,{CLASS_COUNT})"),
            ));
        }
    }
    Ok(bytes[8..need].to_vec())
}

/// Pair image and label files into a dataset; lengths must agree.
pub fn load_dataset(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<Dataset> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            0,
            format!("image count {} vs label count {}", images.shape()[0], labels.len()),
        ));
    }
    Ok(Dataset { images, labels, split })
}

/// Seeded 55k/5k split of the canonical 60k training set: a seeded
/// permutation of [0,60000), first 55000 to train, last 5000 to validation.
pub fn split_train_val(full: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if full.len() != 60_000 {
        return Err(Error::domain(format!(
            "split_train_val expects 60000 samples, got {}",
            full.len()
        )));
    }
    let mut rng = XorShiftRng::derive(seed, 0x5917);
    let perm = rng.permutation(full.len());
    let (train_idx, val_idx) = perm.split_at(55_000);
    let (train_images, train_labels) = full.gather(train_idx);
    let (val_images, val_labels) = full.gather(val_idx);
    Ok((
        Dataset { images: train_images, labels: train_labels, split: SplitTag::Train },
        Dataset { images: val_images, labels: val_labels, split: SplitTag::Val },
    ))
}

/// Batches of (images, labels) covering the dataset once; the final partial
/// batch is emitted as-is. With `shuffle`, the order is a seeded permutation.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn batch_iterator(dataset: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        XorShiftRng::derive(seed, 0xBA7C).shuffle(&mut order);
    }
    BatchIter { dataset, order, batch_size, cursor: 0 }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = (Tensor, Vec<u8>);

    fn next(&mut self) -> Option<(Tensor, Vec<u8>)> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        Some(self.dataset.gather(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn handcrafted_image_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imgs");
        write_images(&p, 1, 2, 2, &[0, 128, 255, 64]);
        let t = load_idx_images(&p).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        let want = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, b) in t.data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imgs");
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap(); // 0x…0801 in an image slot
        f.write_all(&1u32.to_be_bytes()).unwrap();
        drop(f);
        assert!(matches!(load_idx_images(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_roundtrip_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels");
        write_labels(&p, &[7, 2, 1]);
        assert_eq!(load_idx_labels(&p).unwrap(), vec![7, 2, 1]);

        let bad = dir.path().join("bad");
        write_labels(&bad, &[3, 10]);
        assert!(matches!(load_idx_labels(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn length_mismatch_detected_at_assembly() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("imgs");
        let labels = dir.path().join("labels");
        write_images(&imgs, 2, 2, 2, &[0; 8]);
        write_labels(&labels, &[1, 2, 3]);
        assert!(load_dataset(&imgs, &labels, SplitTag::Train).is_err());
    }

    #[test]
    fn gzip_accepted_transparently() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.gz");
        let mut raw = Vec::new();
        raw.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        raw.extend_from_slice(&2u32.to_be_bytes());
        raw.extend_from_slice(&[4, 9]);
        let f = fs::File::create(&p).unwrap();
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx_labels(&p).unwrap(), vec![4, 9]);
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let data: Vec<f32> = (0..n * 4).map(|i| (i % 7) as f32 / 7.0).collect();
        Dataset {
            images: Tensor::from_vec(vec![n, 1, 2, 2], data).unwrap(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            split: SplitTag::Train,
        }
    }

    #[test]
    fn batch_sizes_cover_dataset_once() {
        let d = tiny_dataset(250);
        let sizes: Vec<usize> = batch_iterator(&d, 100, false, 0).map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![100, 100, 50]);
    }

    #[test]
    fn unshuffled_preserves_order_and_seeded_shuffle_repeats() {
        let d = tiny_dataset(30);
        let first: Vec<u8> = batch_iterator(&d, 10, false, 0).flat_map(|(_, l)| l).collect();
        assert_eq!(first, d.labels);
        let a: Vec<u8> = batch_iterator(&d, 10, true, 42).flat_map(|(_, l)| l).collect();
        let b: Vec<u8> = batch_iterator(&d, 10, true, 42).flat_map(|(_, l)| l).collect();
        assert_eq!(a, b);
        assert_ne!(a, d.labels);
    }

    #[test]
    fn split_requires_canonical_size() {
        let d = tiny_dataset(100);
        assert!(split_train_val(&d, 0).is_err());
    }
}
