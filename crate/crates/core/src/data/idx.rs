//! IDX image and label files.
//!
//! Both start with a big-endian `u32` magic whose low byte is the number of
//! dimensions, followed by one big-endian `u32` extent per dimension and the
//! unsigned bytes. Images use `0x00000803` (`count x rows x cols`) and labels
//! `0x00000801`.

use std::path::Path;

use crate::error::{io_at, Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "{} is truncated: needed {} bytes at offset {}, file has {}",
                self.what,
                n,
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut cur = Cursor { bytes, pos: 0, what };
    let found = cur.u32()?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: magic 0x{found:08x}, expected 0x{magic:08x}"
        )));
    }
    let dims = (magic & 0xff) as usize;
    let mut shape = Vec::with_capacity(dims);
    for _ in 0..dims {
        shape.push(cur.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("{what}: extents {shape:?} overflow")))?;
    let payload = cur.take(numel)?.to_vec();
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{what}: {} trailing bytes after the payload",
            bytes.len() - cur.pos
        )));
    }
    Ok((shape, payload))
}

/// Images as `[count, 1, rows, cols]` with bytes scaled by `1/255`.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (shape, payload) = parse(bytes, IDX_IMAGES_MAGIC, "IDX images")?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[shape[0], 1, shape[1], shape[2]], data)
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse(bytes, IDX_LABELS_MAGIC, "IDX labels")?;
    Ok(payload.into_iter().map(usize::from).collect())
}

/// Loads an image file and a label file; every sample lands in the train
/// split and the class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(&std::fs::read(images_path).map_err(|e| io_at(images_path, e))?)?;
    let labels = read_idx_labels(&std::fs::read(labels_path).map_err(|e| io_at(labels_path, e))?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.shape()[0],
            labels_path.display(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::unsplit(images, labels, classes)
}

fn to_byte(v: f64) -> Result<u8> {
    let b = (v * 255.0).round();
    if !(0.0..=255.0).contains(&b) {
        return Err(Error::Data(format!("pixel value {v} does not fit a byte")));
    }
    Ok(b as u8)
}

/// Encodes single-channel images in `[0, 1]` and their labels. Pixels are
/// rounded to the nearest multiple of `1/255`.
pub fn encode_idx(images: &Tensor, labels: &[usize]) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Dimension(format!("IDX images must be M x 1 x H x W, got {s:?}")));
    }
    if s[0] != labels.len() {
        return Err(Error::Data(format!("{} images but {} labels", s[0], labels.len())));
    }
    let extent = |e: usize| -> Result<[u8; 4]> {
        u32::try_from(e)
            .map(u32::to_be_bytes)
            .map_err(|_| Error::Data(format!("extent {e} does not fit IDX")))
    };
    let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for e in [s[0], s[2], s[3]] {
        img.extend(extent(e)?);
    }
    for &v in images.data() {
        img.push(to_byte(v)?);
    }
    let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    lab.extend(extent(labels.len())?);
    for &l in labels {
        lab.push(u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?);
    }
    Ok((img, lab))
}

/// Writes every sample of `ds`, in index order.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds.inputs(), ds.labels())?;
    std::fs::write(images_path, img).map_err(|e| io_at(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| io_at(labels_path, e))?;
    Ok(())
}
