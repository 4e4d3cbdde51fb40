//! Directory-labelled dataset construction.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::image::{load_image, normalize, resize_bilinear};
use super::{DataError, DatasetWriter, Example, LabelMap, Result};

/// Files decoded concurrently before being appended in order.
const CHUNK: usize = 64;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildSummary {
    pub label_map: LabelMap,
    pub class_counts: Vec<usize>,
    pub skipped: Vec<SkippedFile>,
    pub empty_classes: Vec<String>,
    pub total: usize,
    pub checksum: u64,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn class_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(DataError::io(dir))? {
        let path = entry.map_err(DataError::io(dir))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Ingests `root/<class>/*.{png,jpg,jpeg}` for every class of `label_map`,
/// resizing to `image_size` (height, width), and writes the dataset file to
/// `output`. Examples appear in (class id, file name) order. Undecodable files
/// are skipped and listed in the summary.
pub fn build_dataset(
    root: &Path,
    label_map: &LabelMap,
    image_size: (usize, usize),
    output: &Path,
) -> Result<BuildSummary> {
    if !root.is_dir() {
        return Err(DataError::Validation(format!(
            "input directory {} does not exist",
            root.display()
        )));
    }
    let mut per_class = Vec::with_capacity(label_map.len());
    for name in label_map.names() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(DataError::MissingClassDir(dir));
        }
        per_class.push(class_files(&dir)?);
    }

    let (h, w) = image_size;
    let mut writer = DatasetWriter::create(output, label_map, image_size)?;
    let mut class_counts = vec![0; label_map.len()];
    let mut skipped = Vec::new();
    let mut empty_classes = Vec::new();

    for (label, files) in per_class.iter().enumerate() {
        let class = label_map.name(label).unwrap_or_default();
        for chunk in files.chunks(CHUNK) {
            let decoded: Vec<_> = chunk
                .par_iter()
                .map(|path| {
                    let grid = load_image(path)?;
                    Ok::<_, DataError>(normalize(&resize_bilinear(&grid, w, h)?))
                })
                .collect();
            for (path, result) in chunk.iter().zip(decoded) {
                match result {
                    Ok(image) => {
                        let file_name = path.file_name().unwrap_or_default().to_string_lossy();
                        writer.push(&Example {
                            image,
                            label,
                            source_id: format!("{class}/{file_name}"),
                        })?;
                        class_counts[label] += 1;
                    }
                    Err(e) if e.is_io() => return Err(e),
                    Err(e) => {
                        warn!("skipping {}: {e}", path.display());
                        skipped.push(SkippedFile {
                            path: path.clone(),
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
        if class_counts[label] == 0 {
            warn!("class `{class}` has no usable images");
            empty_classes.push(class.to_string());
        }
        info!("{class}: {} images", class_counts[label]);
    }

    let total = writer.len();
    if total == 0 {
        return Err(DataError::Validation(format!(
            "no usable images under {}",
            root.display()
        )));
    }
    let checksum = writer.finish()?;
    Ok(BuildSummary {
        label_map: label_map.clone(),
        class_counts,
        skipped,
        empty_classes,
        total,
        checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_dataset;
    use image::{ImageBuffer, Rgb};

    fn write_png(path: &Path, w: u32, h: u32, v: u8) {
        ImageBuffer::from_pixel(w, h, Rgb([v, v / 2, 255 - v])).save(path).unwrap();
    }

    fn tree(root: &Path) {
        for (i, class) in LabelMap::default().names().iter().enumerate() {
            let dir = root.join(class);
            fs::create_dir_all(&dir).unwrap();
            for j in 0..=i {
                write_png(&dir.join(format!("img{j}.png")), 5 + j as u32, 7, (40 * i + j) as u8);
            }
        }
    }

    #[test]
    fn builds_sorted_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("in");
        tree(&root);
        fs::write(root.join("glioma/zz_broken.png"), b"not a png").unwrap();
        fs::write(root.join("glioma/notes.txt"), b"ignored").unwrap();
        let out = dir.path().join("d.cfds");
        let s = build_dataset(&root, &LabelMap::default(), (8, 8), &out).unwrap();
        assert_eq!(s.class_counts, vec![1, 2, 3, 4]);
        assert_eq!(s.total, 10);
        assert_eq!(s.skipped.len(), 1);
        assert!(s.skipped[0].path.ends_with("glioma/zz_broken.png"));

        let (ds, sum) = read_dataset(&out).unwrap();
        assert_eq!(sum, s.checksum);
        let labels: Vec<_> = ds.examples.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![0, 1, 1, 2, 2, 2, 3, 3, 3, 3]);
        assert_eq!(ds.examples[3].source_id, "meningioma/img0.png");
        assert_eq!(ds.class_counts(), s.class_counts);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("in");
        tree(&root);
        let a = dir.path().join("a.cfds");
        let b = dir.path().join("b.cfds");
        build_dataset(&root, &LabelMap::default(), (6, 6), &a).unwrap();
        build_dataset(&root, &LabelMap::default(), (6, 6), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn missing_class_directory() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("in");
        tree(&root);
        fs::remove_dir_all(root.join("pituitary")).unwrap();
        let err = build_dataset(&root, &LabelMap::default(), (6, 6), &dir.path().join("x")).unwrap_err();
        assert!(matches!(err, DataError::MissingClassDir(_)));
    }

    #[test]
    fn empty_class_is_a_warning_and_empty_root_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("in");
        tree(&root);
        fs::remove_file(root.join("healthy/img0.png")).unwrap();
        let s = build_dataset(&root, &LabelMap::default(), (6, 6), &dir.path().join("a")).unwrap();
        assert_eq!(s.empty_classes, vec!["healthy".to_string()]);

        let bare = dir.path().join("bare");
        for class in LabelMap::default().names() {
            fs::create_dir_all(bare.join(class)).unwrap();
        }
        assert!(build_dataset(&bare, &LabelMap::default(), (6, 6), &dir.path().join("b")).is_err());
        assert!(build_dataset(&dir.path().join("nope"), &LabelMap::default(), (6, 6), &dir.path().join("c")).is_err());
    }
}
