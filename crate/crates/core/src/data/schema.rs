//! Merged-per-image annotation files.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! annotations.json   images / annotations / categories, boxes in absolute pixels
//! manifest.json      scene ids per split
//! images/<id>.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_scene, GazeObject, GenConfig, HgfAnnotation, SceneImage, SceneLabels, SceneRecord};
use crate::geometry::{Box, Point2D};
use crate::{seed, Error, Result};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub width: u32,
    pub height: u32,
}

/// One annotation in absolute pixel coordinates. The score fields are only
/// written by inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAnnotation {
    pub image_id: u64,
    pub head_box: [f64; 4],
    pub watch_inside: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_object_box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_object_category: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watch_inside_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_object_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<RawAnnotation>,
    pub categories: Vec<CategoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene_ids: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
    pub gen_config: Option<GenConfig>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn split_counts(&self) -> BTreeMap<String, usize> {
        self.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }
}

fn scale_box(b: &Box, w: f64, h: f64) -> [f64; 4] {
    [b.x_tl * w, b.y_tl * h, b.x_br * w, b.y_br * h]
}

fn unscale_box(b: &[f64; 4], w: f64, h: f64) -> Box {
    Box::new(b[0] / w, b[1] / h, b[2] / w, b[3] / h)
}

impl RawAnnotation {
    pub fn from_annotation(image_id: u64, a: &HgfAnnotation, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            image_id,
            head_box: scale_box(&a.head_box, w, h),
            watch_inside: a.watch_inside,
            gaze_point: a.gaze_point.map(|p| [p.x * w, p.y * h]),
            gaze_object_box: a.gaze_object.map(|o| scale_box(&o.bbox, w, h)),
            gaze_object_category: a.gaze_object.map(|o| o.category),
            head_score: None,
            watch_inside_score: None,
            gaze_object_score: None,
        }
    }

    /// Normalizes and validates against the image size.
    pub fn to_annotation(&self, width: u32, height: u32, context: &str) -> Result<HgfAnnotation> {
        let (w, h) = (width as f64, height as f64);
        let check_order = |b: &[f64; 4], field: &str| -> Result<()> {
            if b[0] > b[2] || b[1] > b[3] {
                return Err(Error::validation(
                    format!("{context}.{field}"),
                    format!("corners out of order: {b:?}"),
                ));
            }
            Ok(())
        };
        check_order(&self.head_box, "head_box")?;
        let gaze_object = match (self.gaze_object_box, self.gaze_object_category) {
            (Some(b), Some(c)) => {
                check_order(&b, "gaze_object_box")?;
                Some(GazeObject {
                    bbox: unscale_box(&b, w, h),
                    category: c,
                })
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::validation(
                    format!("{context}.gaze_object_category"),
                    "missing while gaze_object_box is present",
                ))
            }
            (None, Some(_)) => {
                return Err(Error::validation(
                    format!("{context}.gaze_object_box"),
                    "missing while gaze_object_category is present",
                ))
            }
        };
        let ann = HgfAnnotation {
            head_box: unscale_box(&self.head_box, w, h),
            watch_inside: self.watch_inside,
            gaze_point: self.gaze_point.map(|p| Point2D::new(p[0] / w, p[1] / h)),
            gaze_object,
        };
        ann.validate(context)?;
        Ok(ann)
    }
}

pub fn category_entries(n: usize) -> Vec<CategoryEntry> {
    (1..=n as u32)
        .map(|id| CategoryEntry {
            id,
            name: format!("category_{id}"),
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes records (pixels + annotations) to `dir`.
pub fn write_dataset(
    records: &[SceneRecord],
    num_categories: usize,
    dir: &Path,
    val_ids: &[String],
    gen: Option<(&GenConfig, u64)>,
) -> Result<DatasetManifest> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut file = AnnotationFile {
        images: Vec::with_capacity(records.len()),
        annotations: Vec::new(),
        categories: category_entries(num_categories),
    };
    for (i, rec) in records.iter().enumerate() {
        let id = i as u64 + 1;
        let rel = format!("images/{}.png", rec.scene_id);
        let path = dir.join(&rel);
        rec.image
            .to_rgb8()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::Image(other),
            })?;
        file.images.push(ImageEntry {
            id,
            file: rel,
            width: rec.image.width as u32,
            height: rec.image.height as u32,
        });
        file.annotations.extend(
            rec.annotations
                .iter()
                .map(|a| RawAnnotation::from_annotation(id, a, rec.image.width, rec.image.height)),
        );
    }
    write_json(&dir.join(ANNOTATION_FILE), &file)?;

    let scene_ids: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    let mut splits = BTreeMap::new();
    splits.insert(
        "train".to_string(),
        scene_ids.iter().filter(|s| !val_ids.contains(s)).cloned().collect(),
    );
    if !val_ids.is_empty() {
        splits.insert("val".to_string(), val_ids.to_vec());
    }
    let manifest = DatasetManifest {
        scene_ids,
        splits,
        gen_config: gen.map(|(c, _)| c.clone()),
        seed: gen.map(|(_, s)| s),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Generates `count` scenes with per-scene seeds split from `seed` and writes
/// them to `out_path`. The trailing `val_fraction` of scenes form the `val` split.
pub fn generate_dataset(cfg: &GenConfig, seed: u64, count: usize, out_path: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let records: Vec<SceneRecord> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rec = generate_scene(seed::derive(seed, "generate", i as u64), cfg)?;
            rec.scene_id = format!("scene_{i:06}");
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let n_val = (cfg.val_fraction * count as f64).round() as usize;
    let val_ids: Vec<String> = records[count - n_val..].iter().map(|r| r.scene_id.clone()).collect();
    write_dataset(&records, cfg.num_categories, out_path, &val_ids, Some((cfg, seed)))
}

fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATION_FILE)
    } else {
        path.to_path_buf()
    }
}

fn parse_annotation_file(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Loads annotations only, grouped per image in file order.
pub fn load_annotations(path: &Path) -> Result<(Vec<(ImageEntry, SceneLabels)>, usize)> {
    let file_path = annotation_path(path);
    let file = parse_annotation_file(&file_path)?;
    let n_categories = file.categories.len();
    let known: std::collections::BTreeSet<u32> = file.categories.iter().map(|c| c.id).collect();
    let mut by_image: BTreeMap<u64, Vec<HgfAnnotation>> = BTreeMap::new();
    let index: BTreeMap<u64, &ImageEntry> = file.images.iter().map(|im| (im.id, im)).collect();
    for (i, raw) in file.annotations.iter().enumerate() {
        let context = format!("annotations[{i}]");
        let image = index.get(&raw.image_id).ok_or_else(|| {
            Error::validation(format!("{context}.image_id"), format!("unknown image id {}", raw.image_id))
        })?;
        if let Some(c) = raw.gaze_object_category {
            if !known.contains(&c) {
                return Err(Error::validation(
                    format!("{context}.gaze_object_category"),
                    format!("category {c} not listed in categories"),
                ));
            }
        }
        let ann = raw.to_annotation(image.width, image.height, &context)?;
        by_image.entry(raw.image_id).or_default().push(ann);
    }
    let out = file
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            if im.width == 0 || im.height == 0 {
                return Err(Error::validation(format!("images[{i}]"), "width and height must be positive"));
            }
            let scene_id = Path::new(&im.file)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| im.id.to_string());
            Ok((
                im.clone(),
                SceneLabels {
                    scene_id,
                    width: im.width as usize,
                    height: im.height as usize,
                    annotations: by_image.remove(&im.id).unwrap_or_default(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, n_categories))
}

fn read_image(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8())
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Split names listed in a dataset manifest.
pub fn split_names(dir: &Path) -> Result<Vec<String>> {
    Ok(read_manifest(dir)?.splits.keys().cloned().collect())
}

/// Annotations held in memory with pixels loaded on demand.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub num_categories: usize,
    pub entries: Vec<(ImageEntry, SceneLabels)>,
}

impl DatasetIndex {
    /// Indexes a dataset directory or annotation file, optionally restricted
    /// to one manifest split. Images without annotations are skipped.
    pub fn open(path: &Path, split: Option<&str>) -> Result<Self> {
        let file_path = annotation_path(path);
        let root = file_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let (mut entries, num_categories) = load_annotations(&file_path)?;
        entries.retain(|(_, l)| !l.annotations.is_empty());
        if let Some(split) = split {
            let manifest = read_manifest(&root)?;
            let ids = manifest.splits.get(split).ok_or_else(|| {
                Error::validation(root.join(MANIFEST_FILE).display().to_string(), format!("no split named {split:?}"))
            })?;
            let wanted: std::collections::BTreeSet<&String> = ids.iter().collect();
            entries.retain(|(_, l)| wanted.contains(&l.scene_id));
        }
        Ok(Self {
            root,
            num_categories,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&self, i: usize) -> Result<SceneRecord> {
        let (entry, labels) = &self.entries[i];
        let img_path = self.root.join(&entry.file);
        let img = read_image(&img_path)?;
        if img.width() != entry.width || img.height() != entry.height {
            return Err(Error::validation(
                entry.file.clone(),
                format!(
                    "image is {}x{} but annotation file says {}x{}",
                    img.width(),
                    img.height(),
                    entry.width,
                    entry.height
                ),
            ));
        }
        Ok(SceneRecord {
            scene_id: labels.scene_id.clone(),
            image: SceneImage::from_rgb8(&img),
            annotations: labels.annotations.clone(),
        })
    }

    pub fn records(&self, indices: &[usize]) -> Result<Vec<SceneRecord>> {
        indices.par_iter().map(|&i| self.record(i)).collect()
    }

    pub fn all_records(&self) -> Result<Vec<SceneRecord>> {
        self.records(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Loads every record with pixels. Images without annotations are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    DatasetIndex::open(path, None)?.all_records()
}

/// Loads the records of one manifest split.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SceneRecord>> {
    DatasetIndex::open(dir, Some(split))?.all_records()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_file() -> AnnotationFile {
        let raw = |image_id, head_box| RawAnnotation {
            image_id,
            head_box,
            watch_inside: true,
            gaze_point: Some([10.0, 10.0]),
            gaze_object_box: None,
            gaze_object_category: None,
            head_score: None,
            watch_inside_score: None,
            gaze_object_score: None,
        };
        AnnotationFile {
            images: vec![
                ImageEntry {
                    id: 1,
                    file: "images/a.png".into(),
                    width: 100,
                    height: 50,
                },
                ImageEntry {
                    id: 2,
                    file: "images/b.png".into(),
                    width: 100,
                    height: 50,
                },
            ],
            annotations: vec![
                raw(1, [0.0, 0.0, 50.0, 25.0]),
                raw(2, [10.0, 5.0, 20.0, 10.0]),
                raw(2, [30.0, 5.0, 40.0, 10.0]),
            ],
            categories: category_entries(2),
        }
    }

    #[test]
    fn merged_annotations_group_by_image_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ANNOTATION_FILE);
        write_json(&path, &sample_file()).unwrap();
        let (entries, n_cat) = load_annotations(&path).unwrap();
        assert_eq!(n_cat, 2);
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].1.annotations.len(), 1);
        assert_eq!(entries[1].1.annotations.len(), 2);
        assert_eq!(entries[0].1.annotations[0].head_box, Box::new(0.0, 0.0, 0.5, 0.5));
        assert_eq!(entries[0].1.annotations[0].gaze_point, Some(Point2D::new(0.1, 0.2)));
    }

    #[test]
    fn missing_gaze_point_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ANNOTATION_FILE);
        let mut f = sample_file();
        f.annotations[1].gaze_point = None;
        write_json(&path, &f).unwrap();
        let err = load_annotations(&path).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
        assert!(err.to_string().contains("annotations[1]"), "{err}");
    }

    #[test]
    fn inverted_box_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ANNOTATION_FILE);
        let mut f = sample_file();
        f.annotations[2].head_box = [40.0, 5.0, 30.0, 10.0];
        write_json(&path, &f).unwrap();
        let err = load_annotations(&path).unwrap_err();
        assert!(err.to_string().contains("annotations[2].head_box"), "{err}");
    }

    #[test]
    fn schema_violation_names_record_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ANNOTATION_FILE);
        let text = serde_json::to_string(&sample_file())
            .unwrap()
            .replacen("\"watch_inside\":true", "\"watch_inside\":\"yes\"", 1);
        fs::write(&path, text).unwrap();
        match load_annotations(&path).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, "annotations[0].watch_inside"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            val_fraction: 0.2,
            ..GenConfig::default()
        };
        let manifest = generate_dataset(&cfg, 3, 10, dir.path()).unwrap();
        assert_eq!(manifest.scene_ids.len(), 10);
        assert_eq!(manifest.split_counts()["train"], 8);
        assert_eq!(manifest.split_counts()["val"], 2);
        let loaded = load_dataset(dir.path()).unwrap();
        for (i, rec) in loaded.iter().enumerate() {
            let mut orig = generate_scene(seed::derive(3, "generate", i as u64), &cfg).unwrap();
            orig.scene_id = format!("scene_{i:06}");
            assert_eq!(rec, &orig);
        }
        assert_eq!(load_split(dir.path(), "val").unwrap().len(), 2);

        let again = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, 3, 10, again.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join(ANNOTATION_FILE)).unwrap(),
            fs::read(again.path().join(ANNOTATION_FILE)).unwrap()
        );
    }

    proptest! {
        #[test]
        fn pixel_normalization_round_trips(k in 1u32..40, a in 0u32..1280, half in any::<bool>()) {
            let w = 32 * k;
            let px = (a % (w + 1)) as f64 + if half && a % (w + 1) < w { 0.5 } else { 0.0 };
            let norm = px / w as f64;
            let back = (norm * w as f64) / w as f64;
            prop_assert_eq!(back, norm);
        }
    }
}
