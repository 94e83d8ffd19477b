//! Trajectory overlays on top of a road mask, written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{BBox, PixelPoint};
use crate::planner::RoadMask;

pub const GREEN: [u8; 3] = [40, 220, 60];
pub const RED: [u8; 3] = [230, 40, 40];
pub const BLUE: [u8; 3] = [60, 120, 255];
const ROAD: [u8; 3] = [90, 90, 90];
const OFF_ROAD: [u8; 3] = [25, 25, 25];
const BOX: [u8; 3] = [250, 200, 0];

pub struct Layer<'a> {
    pub points: &'a [PixelPoint],
    pub color: [u8; 3],
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, a: PixelPoint, b: PixelPoint, c: [u8; 3]) {
    let steps = a.distance(&b).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let p = a.lerp(&b, i as f64 / steps as f64);
        let (x, y) = (p.x.round() as i64, p.y.round() as i64);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            put(img, x + dx, y + dy, c);
        }
    }
}

fn outline(img: &mut RgbImage, b: &BBox, c: [u8; 3]) {
    let corners = [
        PixelPoint::new(b.x, b.y),
        PixelPoint::new(b.right(), b.y),
        PixelPoint::new(b.right(), b.bottom()),
        PixelPoint::new(b.x, b.bottom()),
    ];
    for i in 0..4 {
        line(img, corners[i], corners[(i + 1) % 4], c);
    }
}

pub fn overlay(mask: &RoadMask, boxes: &[BBox], layers: &[Layer]) -> RgbImage {
    let mut img = RgbImage::new(mask.width() as u32, mask.height() as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = Rgb(if mask.get(x as usize, y as usize) {
            ROAD
        } else {
            OFF_ROAD
        });
    }
    for b in boxes {
        outline(&mut img, b, BOX);
    }
    for layer in layers {
        for w in layer.points.windows(2) {
            line(&mut img, w[0], w[1], layer.color);
        }
        if let [p] = layer.points {
            line(&mut img, *p, *p, layer.color);
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
