//! IDX (MNIST-style) image and label files.
//!
//! Header fields are big-endian `u32`: magic, item count, then rows and
//! columns for image files. Pixels are unsigned bytes scaled to `[0, 1]`.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct BeReader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'static str,
}

impl<'a> BeReader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::UnexpectedEof {
                what: format!("{} file {field}", self.file),
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expect: u32) -> Result<()> {
        let magic = self.u32("magic")?;
        if magic != expect {
            return Err(Error::Format(format!(
                "{} file has magic 0x{magic:08x}, expected 0x{expect:08x}",
                self.file
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} file has {} trailing bytes",
                self.file,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn nonzero(count: u32, file: &str) -> Result<usize> {
    if count == 0 {
        return Err(Error::Value {
            op: "load_idx",
            detail: format!("{file} file declares zero items"),
        });
    }
    Ok(count as usize)
}

/// Images as `[N, 1, rows, cols]` with pixels divided by 255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut r = BeReader {
        buf: bytes,
        pos: 0,
        file: "images",
    };
    r.magic(IMAGES_MAGIC)?;
    let n = nonzero(r.u32("count")?, "images")?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("images file has empty geometry {rows}x{cols}")));
    }
    let pixels = r.take(n * rows * cols, "pixels")?;
    r.finish()?;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = BeReader {
        buf: bytes,
        pos: 0,
        file: "labels",
    };
    r.magic(LABELS_MAGIC)?;
    let n = nonzero(r.u32("count")?, "labels")?;
    let labels = r.take(n, "labels")?.iter().map(|&l| l as usize).collect();
    r.finish()?;
    Ok(labels)
}

/// Parses a pair of IDX buffers. `num_classes` defaults to the largest
/// label plus one.
pub fn idx_dataset(images: &[u8], labels: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format(format!(
            "images file holds {} items but labels file holds {}",
            images.shape()[0],
            labels.len()
        )));
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(images, labels, classes)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    idx_dataset(&read(images.as_ref())?, &read(labels.as_ref())?, num_classes)
}

/// Encodes images (values in `[0, 1]`, rounded to bytes) and labels.
pub fn encode_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = dataset.image_shape();
    if c != 1 {
        return Err(Error::Shape {
            op: "encode_idx",
            detail: format!("IDX images are single-channel, got {c} channels"),
        });
    }
    let n = dataset.len() as u32;
    let mut images = Vec::new();
    for v in [IMAGES_MAGIC, n, h as u32, w as u32] {
        images.extend(v.to_be_bytes());
    }
    images.extend(
        dataset
            .images()
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut labels = Vec::new();
    for v in [LABELS_MAGIC, n] {
        labels.extend(v.to_be_bytes());
    }
    for &l in dataset.labels() {
        labels.push(u8::try_from(l).map_err(|_| Error::Value {
            op: "encode_idx",
            detail: format!("label {l} does not fit a byte"),
        })?);
    }
    Ok((images, labels))
}
