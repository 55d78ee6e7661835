//! Scenes, annotations, on-disk datasets and target encoding.

mod schema;
mod synth;
mod targets;

pub use schema::{
    category_entries, generate_dataset, load_annotations, load_dataset, load_split, split_names, write_dataset,
    AnnotationFile, CategoryEntry, DatasetIndex, DatasetManifest, ImageEntry, RawAnnotation, ANNOTATION_FILE,
    MANIFEST_FILE,
};
pub use synth::{generate_scene, GenConfig};
pub use targets::{encode_targets, TargetInstance, TargetSet};

use crate::geometry::{Box, Point2D};

/// A labeled object that a person looks at. `category` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeObject {
    pub bbox: Box,
    pub category: u32,
}

/// One head-gaze-following ground truth.
///
/// `gaze_point` and `gaze_object` are absent when the person looks outside
/// the frame. An in-frame gaze with no `gaze_object` is a background gaze.
#[derive(Debug, Clone, PartialEq)]
pub struct HgfAnnotation {
    pub head_box: Box,
    pub watch_inside: bool,
    pub gaze_point: Option<Point2D>,
    pub gaze_object: Option<GazeObject>,
}

impl HgfAnnotation {
    pub fn validate(&self, context: &str) -> crate::Result<()> {
        use crate::Error;
        if !self.head_box.is_valid() {
            return Err(Error::validation(context, format!("head_box {:?} is not a valid normalized box", self.head_box)));
        }
        match (self.watch_inside, self.gaze_point) {
            (true, None) => return Err(Error::validation(context, "gaze_point is required when watch_inside is true")),
            (false, Some(_)) => return Err(Error::validation(context, "gaze_point must be absent when watch_inside is false")),
            _ => {}
        }
        if let Some(obj) = &self.gaze_object {
            if !self.watch_inside {
                return Err(Error::validation(context, "gaze_object must be absent when watch_inside is false"));
            }
            if !obj.bbox.is_valid() {
                return Err(Error::validation(context, format!("gaze_object_box {:?} is not a valid normalized box", obj.bbox)));
            }
            if obj.category == 0 {
                return Err(Error::validation(context, "gaze_object_category must be >= 1"));
            }
        }
        Ok(())
    }
}

/// RGB image in channel-major layout with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SceneImage {
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height, self.width);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| {
                let v = self.data[c * h * w + y as usize * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        })
    }
}

/// An image with all of its head-gaze annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub image: SceneImage,
    pub annotations: Vec<HgfAnnotation>,
}

/// Annotations of one image without pixel data, used by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLabels {
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<HgfAnnotation>,
}

impl SceneRecord {
    pub fn labels(&self) -> SceneLabels {
        SceneLabels {
            scene_id: self.scene_id.clone(),
            width: self.image.width,
            height: self.image.height,
            annotations: self.annotations.clone(),
        }
    }
}
