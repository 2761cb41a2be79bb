//! In-memory labelled image sets and the IDX file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, H, L, C]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dimension("dataset", images.shape(), &[labels.len()]));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape `[H, L, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn example_len(&self) -> usize {
        let [h, w, c] = self.image_shape();
        h * w * c
    }

    /// The first `n` examples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels }
    }

    /// Gathers the examples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [h, w, c] = self.image_shape();
        let images = Tensor::new(&[indices.len(), h, w, c], data).expect("gathered length");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("magic number {found:#010x}, expected {expected:#010x}"),
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `[N, H, L, 1]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let pixels = r.take(n * h * w)?;
    Tensor::new(&[n, h, w, 1], pixels.iter().map(|&p| p as f64 / 255.0).collect())
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.take(n)?.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(images_path, &read(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            message: format!(
                "{} labels for {} images in {}",
                labels.len(),
                images.shape()[0],
                images_path.display()
            ),
        });
    }
    Dataset::new(images, labels)
}

/// Loads the standard MNIST file pair (`train` or `t10k`) from `dir`.
pub fn load_mnist(dir: &Path, split: &str) -> Result<Dataset> {
    load_idx(
        &dir.join(format!("{split}-images-idx3-ubyte")),
        &dir.join(format!("{split}-labels-idx1-ubyte")),
    )
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

    #[test]
    fn zero_image() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat_n(0, 784));
        let t = parse_idx_images(Path::new("x"), &bytes).unwrap();
        assert_eq!(t.shape(), &[1, 28, 28, 1]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_byte_layout() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9];
        assert_eq!(parse_idx_labels(Path::new("y"), &bytes).unwrap(), vec![7, 2, 9]);
    }

    #[test]
    fn pixel_scaling() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 1, 3]);
        bytes.extend([0, 51, 255]);
        let t = parse_idx_images(Path::new("x"), &bytes).unwrap();
        assert_eq!(t.data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn wrong_magic_cites_value() {
        let bytes = header(LABEL_MAGIC, &[1, 1, 1]);
        let err = parse_idx_images(Path::new("imgs"), &bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("0x00000801"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header(IMAGE_MAGIC, &[2, 28, 28]);
        bytes.extend(std::iter::repeat_n(1, 784));
        let err = parse_idx_images(Path::new("imgs"), &bytes).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
        assert!(parse_idx_labels(Path::new("l"), &[0, 0, 8]).is_err());
    }

    #[test]
    fn batch_gathers_in_order() {
        let images = Tensor::from_fn(&[3, 1, 2, 1], |i| i as f64);
        let d = Dataset::new(images, vec![4, 5, 6]).unwrap();
        let (x, y) = d.batch(&[2, 0]);
        assert_eq!(x.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(y, vec![6, 4]);
        assert_eq!(d.take(2).labels, vec![4, 5]);
        assert_eq!(d.take(10).len(), 3);
    }
}
