//! Image-folder ingestion: `root/<class_name>/<file>`, one subdirectory per
//! class. Stands in for archival image datasets; everything loads as RGB
//! with an optional square resize. All samples start in the train split —
//! apply `split_dataset` afterwards.

use image::imageops::FilterType;
use ndarray::Array4;
use std::path::Path;

use super::{NoisyDataset, Split};
use crate::error::{Error, Result};

pub(super) fn load(root: &Path, resize: Option<u32>) -> Result<NoisyDataset> {
    if !root.is_dir() {
        return Err(Error::load(root, "not a directory"));
    }
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if entry.path().is_dir() && !name.starts_with('.') {
            class_dirs.push((name, entry.path()));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::load(root, "no class subdirectories"));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut files: Vec<(u16, std::path::PathBuf)> = Vec::new();
    for (ci, (_, dir)) in class_dirs.iter().enumerate() {
        let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && !p
                        .file_name()
                        .map(|n| n.to_string_lossy().starts_with('.'))
                        .unwrap_or(true)
            })
            .collect();
        names.sort();
        files.extend(names.into_iter().map(|p| (ci as u16, p)));
    }
    if files.is_empty() {
        return Err(Error::load(root, "class subdirectories contain no files"));
    }

    let mut images: Option<Array4<f32>> = None;
    let mut labels = Vec::with_capacity(files.len());
    let mut dims: Option<(usize, usize)> = None;
    for (i, (label, path)) in files.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::load(path, format!("decode failed: {e}")))?;
        let img = match resize {
            Some(s) => img.resize_exact(s, s, FilterType::Triangle),
            None => img,
        };
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::load(
                    path,
                    format!(
                        "image size {h}x{w} differs from {}x{} (set a resize)",
                        d.0, d.1
                    ),
                ));
            }
            _ => {}
        }
        let store = images.get_or_insert_with(|| Array4::zeros((files.len(), 3, h, w)));
        for (p, px) in rgb.pixels().enumerate() {
            let (y, x) = (p / w, p % w);
            for ch in 0..3 {
                store[[i, ch, y, x]] = px.0[ch] as f32 / 255.0;
            }
        }
        labels.push(*label);
    }

    let n = files.len();
    NoisyDataset::from_parts(
        "folder".to_string(),
        images.expect("nonempty"),
        labels,
        vec![Split::Train; n],
        class_dirs.len(),
        class_dirs.into_iter().map(|(n, _)| n).collect(),
    )
}
