//! IDX-format loader for the classic handwritten-digit files
//! (train-images-idx3-ubyte etc., optionally gzip-compressed).

use flate2::read::GzDecoder;
use ndarray::Array4;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::{NoisyDataset, Split};
use crate::error::{Error, Result};

const MAGIC_IMAGES: u32 = 2051;
const MAGIC_LABELS: u32 = 2049;

/// Open `<base>` or `<base>.gz`, whichever exists.
fn open_maybe_gz(base: &Path) -> Result<(Box<dyn Read>, PathBuf)> {
    if base.exists() {
        return Ok((Box::new(File::open(base)?), base.to_path_buf()));
    }
    let gz = base.with_extension(format!(
        "{}gz",
        base.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    if gz.exists() {
        return Ok((Box::new(GzDecoder::new(File::open(&gz)?)), gz));
    }
    Err(Error::load(base, "file not found (also tried .gz)"))
}

fn read_u32(r: &mut dyn Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::load(path, format!("truncated header: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_images(base: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let (mut r, path) = open_maybe_gz(base)?;
    let magic = read_u32(r.as_mut(), &path)?;
    if magic != MAGIC_IMAGES {
        return Err(Error::load(
            &path,
            format!("bad magic {magic}, expected {MAGIC_IMAGES}"),
        ));
    }
    let n = read_u32(r.as_mut(), &path)? as usize;
    let rows = read_u32(r.as_mut(), &path)? as usize;
    let cols = read_u32(r.as_mut(), &path)? as usize;
    let mut data = vec![0u8; n * rows * cols];
    r.read_exact(&mut data)
        .map_err(|e| Error::load(&path, format!("truncated image data: {e}")))?;
    Ok((data, n, rows, cols))
}

fn read_labels(base: &Path) -> Result<Vec<u8>> {
    let (mut r, path) = open_maybe_gz(base)?;
    let magic = read_u32(r.as_mut(), &path)?;
    if magic != MAGIC_LABELS {
        return Err(Error::load(
            &path,
            format!("bad magic {magic}, expected {MAGIC_LABELS}"),
        ));
    }
    let n = read_u32(r.as_mut(), &path)? as usize;
    let mut data = vec![0u8; n];
    r.read_exact(&mut data)
        .map_err(|e| Error::load(&path, format!("truncated label data: {e}")))?;
    Ok(data)
}

pub(super) fn load_mnist(root: &Path) -> Result<NoisyDataset> {
    let (train_px, n_train, rows, cols) = read_images(&root.join("train-images-idx3-ubyte"))?;
    let train_labels = read_labels(&root.join("train-labels-idx1-ubyte"))?;
    let (test_px, n_test, rows2, cols2) = read_images(&root.join("t10k-images-idx3-ubyte"))?;
    let test_labels = read_labels(&root.join("t10k-labels-idx1-ubyte"))?;
    if rows != rows2 || cols != cols2 {
        return Err(Error::load(root, "train/test image sizes disagree"));
    }
    if train_labels.len() != n_train || test_labels.len() != n_test {
        return Err(Error::load(root, "image/label counts disagree"));
    }

    let n = n_train + n_test;
    let mut images = Array4::zeros((n, 1, rows, cols));
    {
        let dst = images.as_slice_mut().expect("contiguous");
        for (d, &s) in dst[..n_train * rows * cols].iter_mut().zip(train_px.iter()) {
            *d = s as f32 / 255.0;
        }
        for (d, &s) in dst[n_train * rows * cols..].iter_mut().zip(test_px.iter()) {
            *d = s as f32 / 255.0;
        }
    }
    let mut labels: Vec<u16> = Vec::with_capacity(n);
    labels.extend(train_labels.iter().map(|&l| l as u16));
    labels.extend(test_labels.iter().map(|&l| l as u16));
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;

    let mut split = vec![Split::Train; n];
    for tag in split.iter_mut().skip(n_train) {
        *tag = Split::Test;
    }
    let class_names = (0..num_classes).map(|d| d.to_string()).collect();
    NoisyDataset::from_parts(
        "mnist".to_string(),
        images,
        labels,
        split,
        num_classes,
        class_names,
    )
}
