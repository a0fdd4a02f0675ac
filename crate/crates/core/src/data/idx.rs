//! IDX container format: `0x00 0x00 <type> <ndims>`, then `ndims` big-endian u32
//! extents, then big-endian elements.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const MNIST_IMAGES_MAGIC: u32 = 2051;
pub const MNIST_LABELS_MAGIC: u32 = 2049;

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;
const TYPE_F64: u8 = 0x0E;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        let code = match self.data {
            IdxData::U8(_) => TYPE_U8,
            IdxData::F64(_) => TYPE_F64,
        };
        u32::from(code) << 8 | self.dims.len() as u32
    }

    fn values_f64(&self, scale_bytes: bool) -> Vec<f64> {
        match &self.data {
            IdxData::U8(v) if scale_bytes => v.iter().map(|&b| f64::from(b) / 255.0).collect(),
            IdxData::U8(v) => v.iter().map(|&b| f64::from(b)).collect(),
            IdxData::F64(v) => v.clone(),
        }
    }
}

pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format("IDX file shorter than its magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format("IDX magic must start with two zero bytes"));
    }
    let code = bytes[2];
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::format("IDX file declares zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::format("IDX header truncated"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    let width = match code {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        TYPE_F64 => 8,
        other => return Err(Error::format(format!("unsupported IDX element type 0x{other:02x}"))),
    };
    if body.len() != count * width {
        return Err(Error::format(format!(
            "IDX body holds {} bytes, header promises {}",
            body.len(),
            count * width
        )));
    }
    let data = match code {
        TYPE_U8 => IdxData::U8(body.to_vec()),
        TYPE_F32 => IdxData::F64(
            body.chunks_exact(4)
                .map(|c| f64::from(f32::from_be_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
        ),
        _ => IdxData::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ),
    };
    Ok(IdxArray { dims, data })
}

pub fn write_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&array.magic().to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    match &array.data {
        IdxData::U8(v) => out.extend_from_slice(v),
        IdxData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
    }
    out
}

fn read_file(path: &Path) -> Result<IdxArray> {
    read_idx(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn labels_from(array: &IdxArray) -> Result<Vec<usize>> {
    match &array.data {
        IdxData::U8(v) => Ok(v.iter().map(|&b| b as usize).collect()),
        IdxData::F64(_) => Err(Error::format("labels must be unsigned bytes")),
    }
}

/// Strict MNIST loader: images need magic 2051 (u8, count x rows x cols), labels
/// need 2049. Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = read_file(images.as_ref())?;
    let lab = read_file(labels.as_ref())?;
    if img.magic() != MNIST_IMAGES_MAGIC {
        return Err(Error::format(format!("image file magic {} is not {MNIST_IMAGES_MAGIC}", img.magic())));
    }
    if lab.magic() != MNIST_LABELS_MAGIC {
        return Err(Error::format(format!("label file magic {} is not {MNIST_LABELS_MAGIC}", lab.magic())));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::consistency(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let dim = img.dims[1] * img.dims[2];
    let labels = labels_from(&lab)?;
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(dim, classes, img.values_f64(true), labels)
}

/// Writes `data` as an `f64` IDX image file (count x dim) plus a u8 label file.
pub fn save_dataset_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    if data.num_classes() > 256 {
        return Err(Error::config("IDX label files hold at most 256 classes"));
    }
    let img = IdxArray {
        dims: vec![data.len(), data.dim()],
        data: IdxData::F64(data.features().to_vec()),
    };
    let lab = IdxArray {
        dims: vec![data.len()],
        data: IdxData::U8(data.labels().iter().map(|&y| y as u8).collect()),
    };
    fs::write(images, write_idx(&img))?;
    fs::write(labels, write_idx(&lab))?;
    Ok(())
}

/// Loads images of any IDX element type (bytes are scaled to `[0, 1]`), flattening
/// all but the first axis.
pub fn load_dataset_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let img = read_file(images.as_ref())?;
    let lab = read_file(labels.as_ref())?;
    if lab.dims.len() != 1 || lab.magic() != MNIST_LABELS_MAGIC {
        return Err(Error::format("label file must be a 1-D unsigned byte IDX array"));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::consistency(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let dim = img.dims[1..].iter().product::<usize>().max(1);
    Dataset::new(dim, num_classes, img.values_f64(true), labels_from(&lab)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_fixture(dir: &Path, image_magic: u32, n_labels: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = image_magic.to_be_bytes().to_vec();
        for d in [3u32, 28, 28] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..3 * 784).map(|i| (i % 256) as u8));
        let mut lab = MNIST_LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&(n_labels as u32).to_be_bytes());
        lab.extend((0..n_labels).map(|i| (i % 10) as u8));
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_three_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = mnist_fixture(dir.path(), MNIST_IMAGES_MAGIC, 3);
        let d = load_mnist_idx(ip, lp).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 784);
        assert!(d.features().iter().all(|v| (0.0..=1.0).contains(v)));
        // pixel index 255 holds byte 255
        assert_eq!(d.sample(0)[255], 1.0);
        assert_eq!(d.sample(0)[0], 0.0);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = mnist_fixture(dir.path(), 2052, 3);
        assert!(matches!(load_mnist_idx(ip, lp), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = mnist_fixture(dir.path(), MNIST_IMAGES_MAGIC, 4);
        assert!(matches!(load_mnist_idx(ip, lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn truncated_body_rejected() {
        let arr = IdxArray {
            dims: vec![2, 2],
            data: IdxData::F64(vec![0.5; 4]),
        };
        let mut bytes = write_idx(&arr);
        bytes.pop();
        assert!(matches!(read_idx(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn float_dataset_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset::new(3, 4, vec![0.1, 0.2, 1.0 / 3.0, 0.0, 1.0, 0.123456789], vec![3, 1]).unwrap();
        let (ip, lp) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
        save_dataset_idx(&data, &ip, &lp).unwrap();
        assert_eq!(load_dataset_idx(ip, lp, 4).unwrap(), data);
    }
}
