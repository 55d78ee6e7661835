//! Box arithmetic, generalized IoU and Gaussian heatmaps.
//!
//! All coordinates are fractions of the image width/height. Boxes use
//! corner form `(x_tl, y_tl, x_br, y_br)`.

use serde::{Deserialize, Serialize};

/// Default heatmap side length in cells.
pub const HEATMAP_SIZE: usize = 64;
/// Default Gaussian spread in cells.
pub const HEATMAP_SIGMA: f64 = 3.0;

/// Axis-aligned rectangle in normalized corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
}

impl Box {
    pub const fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Self {
        Self {
            x_tl,
            y_tl,
            x_br,
            y_br,
        }
    }

    /// The all-zero box used as a placeholder for absent gaze objects.
    pub const fn degenerate() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    pub fn width(&self) -> f64 {
        (self.x_br - self.x_tl).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_br - self.y_tl).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2D {
        Point2D::new(0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))
    }

    /// Corners ordered and every coordinate inside `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.x_tl <= self.x_br
            && self.y_tl <= self.y_br
            && in_unit(self.x_tl)
            && in_unit(self.y_tl)
            && in_unit(self.x_br)
            && in_unit(self.y_br)
    }

    pub fn contains(&self, p: Point2D) -> bool {
        p.x >= self.x_tl && p.x <= self.x_br && p.y >= self.y_tl && p.y <= self.y_br
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x_tl + dx, self.y_tl + dy, self.x_br + dx, self.y_br + dy)
    }

    pub fn intersection_area(&self, other: &Box) -> f64 {
        let w = (self.x_br.min(other.x_br) - self.x_tl.max(other.x_tl)).max(0.0);
        let h = (self.y_br.min(other.y_br) - self.y_tl.max(other.y_tl)).max(0.0);
        w * h
    }

    /// Tightest box enclosing both.
    pub fn hull(&self, other: &Box) -> Box {
        Box::new(
            self.x_tl.min(other.x_tl),
            self.y_tl.min(other.y_tl),
            self.x_br.max(other.x_br),
            self.y_br.max(other.y_br),
        )
    }
}

/// A point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_frame(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Row-major grid of confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "heatmap dimensions must be positive");
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Wraps raw values. Panics when the length does not match `height * width`.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert!(height > 0 && width > 0, "heatmap dimensions must be positive");
        assert_eq!(values.len(), height * width, "heatmap value count");
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Cell `(row, col)` containing a normalized point, clamped to the grid.
    pub fn cell_of(&self, p: Point2D) -> (usize, usize) {
        let col = ((p.x * self.width as f64).floor().max(0.0) as usize).min(self.width - 1);
        let row = ((p.y * self.height as f64).floor().max(0.0) as usize).min(self.height - 1);
        (row, col)
    }

    /// Normalized coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> Point2D {
        Point2D::new(
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }
}

/// Result of a GIoU evaluation. `degenerate` is set when the enclosing hull has
/// zero area, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Giou {
    pub value: f64,
    pub degenerate: bool,
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU with the degenerate-hull status.
pub fn giou_checked(a: &Box, b: &Box) -> Giou {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    if hull <= 0.0 {
        return Giou {
            value: 0.0,
            degenerate: true,
        };
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    Giou {
        value: iou - (hull - union) / hull,
        degenerate: false,
    }
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &Box, b: &Box) -> f64 {
    giou_checked(a, b).value
}

/// Sum of absolute differences over the four corner coordinates.
pub fn box_l1(a: &Box, b: &Box) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Renders an amplitude-normalized Gaussian centred on the cell that contains
/// `center`. Out-of-frame centers give an all-zero map.
pub fn render_gaussian_heatmap(center: Point2D, height: usize, width: usize, sigma_cells: f64) -> Heatmap {
    assert!(sigma_cells > 0.0, "sigma must be positive");
    let mut map = Heatmap::zeros(height, width);
    if !center.in_frame() {
        return map;
    }
    let (pr, pc) = map.cell_of(center);
    let denom = 2.0 * sigma_cells * sigma_cells;
    for r in 0..height {
        let dr = r as f64 - pr as f64;
        for c in 0..width {
            let dc = c as f64 - pc as f64;
            map.set(r, c, (-(dr * dr + dc * dc) / denom).exp());
        }
    }
    map
}

/// Center of the maximal cell; ties go to the smallest row-major index.
pub fn heatmap_argmax(h: &Heatmap) -> Point2D {
    let mut best = 0;
    for (i, &v) in h.values.iter().enumerate() {
        if v > h.values[best] {
            best = i;
        }
    }
    h.cell_center(best / h.width, best % h.width)
}
