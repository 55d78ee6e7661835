//! Detection overlay drawing: heatmap tint, head and object boxes, gaze rays
//! and small digit labels.

use image::{Rgb, RgbImage};

use crate::geometry::{Box, Point2D};
use crate::metrics::DecodedDetection;

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

/// 3x5 bitmaps for 0-9, one row per byte, high three bits used.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn to_px(img: &RgbImage, p: Point2D) -> (i64, i64) {
    ((p.x * img.width() as f64) as i64, (p.y * img.height() as f64) as i64)
}

pub fn draw_rect(img: &mut RgbImage, b: &Box, c: [u8; 3]) {
    let (x0, y0) = to_px(img, Point2D::new(b.x_tl, b.y_tl));
    let (x1, y1) = to_px(img, Point2D::new(b.x_br, b.y_br));
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

/// Bresenham line.
pub fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn draw_disc(img: &mut RgbImage, center: (i64, i64), r: i64, c: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, center.0 + dx, center.1 + dy, c);
            }
        }
    }
}

/// Draws a non-negative integer at 2x scale with its top-left at `at`.
pub fn draw_number(img: &mut RgbImage, at: (i64, i64), n: u32, c: [u8; 3]) {
    for (k, ch) in n.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for s in 0..4 {
                        let x = at.0 + k as i64 * 8 + col as i64 * 2 + (s % 2);
                        let y = at.1 + row as i64 * 2 + (s / 2);
                        put(img, x, y, c);
                    }
                }
            }
        }
    }
}

/// Alpha-blends a heatmap, upsampled by nearest neighbour, in `tint`.
fn blend_heatmap(img: &mut RgbImage, d: &DecodedDetection, tint: [u8; 3]) {
    let (w, h) = (img.width(), img.height());
    let hm = &d.heatmap;
    let peak = hm.max_value().max(1e-6);
    for y in 0..h {
        for x in 0..w {
            let r = (y as usize * hm.height()) / h as usize;
            let col = (x as usize * hm.width()) / w as usize;
            let a = 0.5 * (hm.get(r, col) / peak).clamp(0.0, 1.0);
            let px = img.get_pixel_mut(x, y);
            for ch in 0..3 {
                px.0[ch] = ((1.0 - a) * px.0[ch] as f64 + a * tint[ch] as f64).round() as u8;
            }
        }
    }
}

/// Overlay of all detections on a copy of `base`.
pub fn render(base: &RgbImage, dets: &[DecodedDetection]) -> RgbImage {
    let mut img = base.clone();
    for (i, d) in dets.iter().enumerate() {
        if d.watch_inside_score >= 0.5 {
            blend_heatmap(&mut img, d, PALETTE[i % PALETTE.len()]);
        }
    }
    for (i, d) in dets.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        draw_rect(&mut img, &d.head_box, c);
        let head = to_px(&img, d.head_box.center());
        if d.watch_inside_score >= 0.5 {
            let g = to_px(&img, d.gaze_point);
            draw_line(&mut img, head, g, c);
            draw_disc(&mut img, g, 3, c);
            if let Some(o) = &d.gaze_object {
                draw_rect(&mut img, &o.bbox, c);
                let (x, y) = to_px(&img, Point2D::new(o.bbox.x_tl, o.bbox.y_tl));
                draw_number(&mut img, (x + 2, y + 2), o.category, c);
            }
        } else {
            // Outside gaze: a short stub above the head.
            draw_line(&mut img, head, (head.0, head.1 - 12), c);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::render_gaussian_heatmap;
    use crate::metrics::DecodedObject;

    #[test]
    fn overlay_marks_boxes_and_leaves_empty_input_alone() {
        let base = RgbImage::from_pixel(64, 64, Rgb([0, 0, 0]));
        assert_eq!(render(&base, &[]), base);
        let d = DecodedDetection {
            query: 0,
            head_box: Box::new(0.1, 0.1, 0.3, 0.3),
            head_score: 0.9,
            watch_inside_score: 0.9,
            heatmap: render_gaussian_heatmap(Point2D::new(0.7, 0.7), 8, 8, 1.0),
            gaze_point: Point2D::new(0.7, 0.7),
            gaze_object: Some(DecodedObject {
                bbox: Box::new(0.6, 0.6, 0.9, 0.9),
                category: 3,
                score: 0.8,
            }),
        };
        let out = render(&base, &[d]);
        assert_eq!(out.get_pixel(6, 10).0, PALETTE[0]);
        assert_ne!(out.get_pixel(45, 45).0, [0, 0, 0]);
    }

    #[test]
    fn lines_reach_both_ends() {
        let mut img = RgbImage::new(10, 10);
        draw_line(&mut img, (1, 8), (7, 2), [255, 255, 255]);
        assert_eq!(img.get_pixel(1, 8).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(7, 2).0, [255, 255, 255]);
    }
}
