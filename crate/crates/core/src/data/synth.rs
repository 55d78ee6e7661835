//! Procedural scenes: head glyphs whose pupil wedge points along the gaze
//! ray, category-colored object rectangles and small fixation markers for
//! background gazes.
//!
//! Every gaze ray is checked against all obstacles, so the first thing a ray
//! from a head hits is exactly its annotated target (an object, a marker, or
//! the frame border for out-of-frame gazes).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GazeObject, HgfAnnotation, SceneImage, SceneRecord};
use crate::geometry::{Box, Point2D};
use crate::{seed, Error, Result};

const MAX_ATTEMPTS: usize = 400;
const OBJECT_MARGIN: f64 = 4.0;
const RAY_MARGIN: f64 = 2.0;
const MARKER_HALF: i64 = 3;

const BACKGROUND: [u8; 3] = [200, 200, 200];
const SKIN: [u8; 3] = [235, 190, 150];
const PUPIL: [u8; 3] = [25, 25, 70];
const MARKER: [u8; 3] = [50, 50, 50];
const PUPIL_HALF_ANGLE: f64 = 35.0 * std::f64::consts::PI / 180.0;

/// Scene generator settings. Sizes are in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub min_people: usize,
    pub max_people: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of object categories `N_o`.
    pub num_categories: usize,
    pub p_out_of_frame: f64,
    pub p_background: f64,
    pub head_radius: [u32; 2],
    pub object_size: [u32; 2],
    /// Fraction of a generated dataset assigned to the `val` split.
    pub val_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            min_people: 1,
            max_people: 3,
            min_objects: 2,
            max_objects: 4,
            num_categories: 4,
            p_out_of_frame: 0.2,
            p_background: 0.15,
            head_radius: [12, 16],
            object_size: [20, 40],
            val_fraction: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.width % 32 != 0 || self.height % 32 != 0 {
            return bad(format!("canvas {}x{} must be a positive multiple of 32", self.width, self.height));
        }
        if self.min_people == 0 || self.min_people > self.max_people {
            return bad(format!("people range {}..={} is empty or zero", self.min_people, self.max_people));
        }
        if self.min_objects > self.max_objects {
            return bad(format!("object range {}..={} is empty", self.min_objects, self.max_objects));
        }
        if self.num_categories == 0 {
            return bad("num_categories must be at least 1".into());
        }
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.p_out_of_frame) || !p_ok(self.p_background) || self.p_out_of_frame + self.p_background > 1.0 {
            return bad("gaze mode probabilities must be in [0,1] and sum to at most 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0,1)".into());
        }
        if self.head_radius[0] < 4 || self.head_radius[0] > self.head_radius[1] {
            return bad(format!("head_radius range {:?} is invalid (minimum 4 px)", self.head_radius));
        }
        if self.object_size[0] < 4 || self.object_size[0] > self.object_size[1] {
            return bad(format!("object_size range {:?} is invalid (minimum 4 px)", self.object_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GazeMode {
    OutOfFrame,
    Background,
    Object,
}

/// Pixel-space rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn grow(&self, m: f64) -> Rect {
        Rect {
            x0: self.x0 - m,
            y0: self.y0 - m,
            x1: self.x1 + m,
            y1: self.y1 + m,
        }
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Liang-Barsky test for the segment `p -> q`.
    fn hits_segment(&self, p: (f64, f64), q: (f64, f64)) -> bool {
        let (dx, dy) = (q.0 - p.0, q.1 - p.1);
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for (den, num) in [
            (-dx, p.0 - self.x0),
            (dx, self.x1 - p.0),
            (-dy, p.1 - self.y0),
            (dy, self.y1 - p.1),
        ] {
            if den == 0.0 {
                if num < 0.0 {
                    return false;
                }
            } else {
                let t = num / den;
                if den < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    fn to_box(self, w: f64, h: f64) -> Box {
        Box::new(self.x0 / w, self.y0 / h, self.x1 / w, self.y1 / h)
    }
}

struct Obstacle {
    rect: Rect,
    color: [u8; 3],
    category: Option<u32>,
}

struct Person {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    annotation: HgfAnnotation,
}

fn category_color(category: u32, n: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [220, 40, 40],
        [40, 170, 60],
        [40, 80, 220],
        [230, 200, 30],
        [200, 50, 200],
        [30, 190, 200],
        [240, 130, 20],
        [120, 60, 170],
    ];
    if n <= PALETTE.len() {
        return PALETTE[(category - 1) as usize];
    }
    let hue = (category - 1) as f64 / n as f64 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let to = |v: f64| (30.0 + v * 200.0) as u8;
    [to(r), to(g), to(b)]
}

fn head_rect(cx: f64, cy: f64, r: f64) -> Rect {
    Rect {
        x0: cx - r,
        y0: cy - r,
        x1: cx + r,
        y1: cy + r,
    }
}

/// Point where the ray from `(cx, cy)` along `angle` leaves the canvas.
fn frame_exit(cx: f64, cy: f64, angle: f64, w: f64, h: f64) -> (f64, f64) {
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut t = f64::INFINITY;
    if dx > 0.0 {
        t = t.min((w - cx) / dx);
    } else if dx < 0.0 {
        t = t.min(-cx / dx);
    }
    if dy > 0.0 {
        t = t.min((h - cy) / dy);
    } else if dy < 0.0 {
        t = t.min(-cy / dy);
    }
    (cx + t * dx, cy + t * dy)
}

struct Layout<'a> {
    cfg: &'a GenConfig,
    obstacles: Vec<Obstacle>,
    people: Vec<Person>,
    rays: Vec<((f64, f64), (f64, f64))>,
}

impl<'a> Layout<'a> {
    fn w(&self) -> f64 {
        self.cfg.width as f64
    }

    fn h(&self) -> f64 {
        self.cfg.height as f64
    }

    fn free_for(&self, rect: &Rect, margin: f64) -> bool {
        let grown = rect.grow(margin);
        self.obstacles.iter().all(|o| !o.rect.overlaps(&grown))
            && self
                .people
                .iter()
                .all(|p| !head_rect(p.cx, p.cy, p.radius).overlaps(&grown))
    }

    fn ray_clear(&self, from: (f64, f64), to: (f64, f64), except: Option<usize>) -> bool {
        self.obstacles
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != except)
            .all(|(_, o)| !o.rect.grow(RAY_MARGIN).hits_segment(from, to))
    }

    fn place_objects(&mut self, rng: &mut ChaCha8Rng, count: usize) -> Result<()> {
        let [lo, hi] = self.cfg.object_size;
        for k in 0..count {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let ow = rng.random_range(lo..=hi) as f64;
                let oh = rng.random_range(lo..=hi) as f64;
                if ow > self.w() || oh > self.h() {
                    break;
                }
                let x0 = rng.random_range(0..=(self.w() - ow) as u32) as f64;
                let y0 = rng.random_range(0..=(self.h() - oh) as u32) as f64;
                let rect = Rect {
                    x0,
                    y0,
                    x1: x0 + ow,
                    y1: y0 + oh,
                };
                if self.free_for(&rect, OBJECT_MARGIN) {
                    let category = rng.random_range(1..=self.cfg.num_categories as u32);
                    self.obstacles.push(Obstacle {
                        rect,
                        color: category_color(category, self.cfg.num_categories),
                        category: Some(category),
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "cannot place object {} of {} (size {}..={} px) without overlap on a {}x{} canvas",
                    k + 1,
                    count,
                    lo,
                    hi,
                    self.cfg.width,
                    self.cfg.height
                )));
            }
        }
        Ok(())
    }

    fn try_person(&mut self, rng: &mut ChaCha8Rng, mode: GazeMode) -> bool {
        let [rlo, rhi] = self.cfg.head_radius;
        let r = rng.random_range(rlo..=rhi) as f64;
        if 2.0 * r + 2.0 > self.w().min(self.h()) {
            return false;
        }
        let cx = rng.random_range(r as u32 + 1..=(self.w() - r - 1.0) as u32) as f64;
        let cy = rng.random_range(r as u32 + 1..=(self.h() - r - 1.0) as u32) as f64;
        let head = head_rect(cx, cy, r);
        if !self.free_for(&head, OBJECT_MARGIN) {
            return false;
        }
        // a new head must not hide an earlier gaze target behind it
        if self.rays.iter().any(|(a, b)| head.hits_segment(*a, *b)) {
            return false;
        }
        let (w, h) = (self.w(), self.h());
        let min_reach = 2.5 * r;
        let head_box = head.to_box(w, h);
        match mode {
            GazeMode::Object => {
                let candidates: Vec<usize> = (0..self.obstacles.len())
                    .filter(|&i| self.obstacles[i].category.is_some())
                    .collect();
                if candidates.is_empty() {
                    return false;
                }
                let target = candidates[rng.random_range(0..candidates.len())];
                let rect = self.obstacles[target].rect;
                let (tx, ty) = rect.center();
                if (tx - cx).hypot(ty - cy) < min_reach || !self.ray_clear((cx, cy), (tx, ty), Some(target)) {
                    return false;
                }
                self.rays.push(((cx, cy), (tx, ty)));
                self.people.push(Person {
                    cx,
                    cy,
                    radius: r,
                    angle: (ty - cy).atan2(tx - cx),
                    annotation: HgfAnnotation {
                        head_box,
                        watch_inside: true,
                        gaze_point: Some(Point2D::new(tx / w, ty / h)),
                        gaze_object: Some(GazeObject {
                            bbox: rect.to_box(w, h),
                            category: self.obstacles[target].category.unwrap_or(1),
                        }),
                    },
                });
                true
            }
            GazeMode::Background => {
                let m = MARKER_HALF;
                let mx = rng.random_range(m as u32..=(w as i64 - m - 1) as u32) as f64;
                let my = rng.random_range(m as u32..=(h as i64 - m - 1) as u32) as f64;
                let marker = Rect {
                    x0: mx - m as f64,
                    y0: my - m as f64,
                    x1: mx + m as f64 + 1.0,
                    y1: my + m as f64 + 1.0,
                };
                let (tx, ty) = marker.center();
                if (tx - cx).hypot(ty - cy) < min_reach
                    || !self.free_for(&marker, OBJECT_MARGIN)
                    || marker.grow(OBJECT_MARGIN).overlaps(&head)
                    || !self.ray_clear((cx, cy), (tx, ty), None)
                    || self.rays.iter().any(|(a, b)| marker.grow(RAY_MARGIN).hits_segment(*a, *b))
                {
                    return false;
                }
                self.obstacles.push(Obstacle {
                    rect: marker,
                    color: MARKER,
                    category: None,
                });
                self.rays.push(((cx, cy), (tx, ty)));
                self.people.push(Person {
                    cx,
                    cy,
                    radius: r,
                    angle: (ty - cy).atan2(tx - cx),
                    annotation: HgfAnnotation {
                        head_box,
                        watch_inside: true,
                        gaze_point: Some(Point2D::new(tx / w, ty / h)),
                        gaze_object: None,
                    },
                });
                true
            }
            GazeMode::OutOfFrame => {
                let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let exit = frame_exit(cx, cy, angle, w, h);
                if !self.ray_clear((cx, cy), exit, None) {
                    return false;
                }
                self.rays.push(((cx, cy), exit));
                self.people.push(Person {
                    cx,
                    cy,
                    radius: r,
                    angle,
                    annotation: HgfAnnotation {
                        head_box,
                        watch_inside: false,
                        gaze_point: None,
                        gaze_object: None,
                    },
                });
                true
            }
        }
    }

    fn render(&self) -> image::RgbImage {
        let (w, h) = (self.cfg.width as u32, self.cfg.height as u32);
        let mut img = image::RgbImage::from_pixel(w, h, image::Rgb(BACKGROUND));
        for o in &self.obstacles {
            let (x0, y0) = (o.rect.x0.max(0.0) as u32, o.rect.y0.max(0.0) as u32);
            let (x1, y1) = ((o.rect.x1 as u32).min(w), (o.rect.y1 as u32).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    img.put_pixel(x, y, image::Rgb(o.color));
                }
            }
        }
        for p in &self.people {
            let x0 = (p.cx - p.radius).floor().max(0.0) as u32;
            let y0 = (p.cy - p.radius).floor().max(0.0) as u32;
            let x1 = ((p.cx + p.radius).ceil() as u32).min(w);
            let y1 = ((p.cy + p.radius).ceil() as u32).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let dx = x as f64 + 0.5 - p.cx;
                    let dy = y as f64 + 0.5 - p.cy;
                    let d = dx.hypot(dy);
                    if d > p.radius {
                        continue;
                    }
                    let mut rel = dy.atan2(dx) - p.angle;
                    rel = (rel + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
                    let color = if d >= 0.2 * p.radius && rel.abs() <= PUPIL_HALF_ANGLE {
                        PUPIL
                    } else {
                        SKIN
                    };
                    img.put_pixel(x, y, image::Rgb(color));
                }
            }
        }
        img
    }
}

/// Generates one scene. Deterministic in `(rng_seed, cfg)`.
pub fn generate_scene(rng_seed: u64, cfg: &GenConfig) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut rng = seed::rng(rng_seed, "scene", 0);
    let n_people = rng.random_range(cfg.min_people..=cfg.max_people);
    let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let modes: Vec<GazeMode> = (0..n_people)
        .map(|_| {
            let u: f64 = rng.random();
            if u < cfg.p_out_of_frame {
                GazeMode::OutOfFrame
            } else if u < cfg.p_out_of_frame + cfg.p_background || n_objects == 0 {
                GazeMode::Background
            } else {
                GazeMode::Object
            }
        })
        .collect();

    let mut layout = Layout {
        cfg,
        obstacles: Vec::new(),
        people: Vec::new(),
        rays: Vec::new(),
    };
    layout.place_objects(&mut rng, n_objects)?;
    for (i, &mode) in modes.iter().enumerate() {
        if !(0..MAX_ATTEMPTS).any(|_| layout.try_person(&mut rng, mode)) {
            return Err(Error::Generation(format!(
                "cannot place person {} of {} ({:?} gaze, head radius {}..={} px) without overlap on a {}x{} canvas",
                i + 1,
                n_people,
                mode,
                cfg.head_radius[0],
                cfg.head_radius[1],
                cfg.width,
                cfg.height
            )));
        }
    }

    let image = SceneImage::from_rgb8(&layout.render());
    Ok(SceneRecord {
        scene_id: format!("scene_{rng_seed:016x}"),
        image,
        annotations: layout.people.into_iter().map(|p| p.annotation).collect(),
    })
}
