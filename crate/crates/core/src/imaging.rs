//! Small RGB image helpers used by chip extraction and augmentation.

use image::{Rgb, RgbImage};

/// Bilinear sample at continuous pixel coordinates (pixel centers at
/// `+0.5`). Columns wrap around when `wrap_x` is set (equirectangular
/// panoramas); rows are clamped.
pub fn sample_bilinear(img: &RgbImage, u: f64, v: f64, wrap_x: bool) -> [f32; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x = u - 0.5;
    let y = v - 0.5;
    let x0f = x.floor();
    let y0f = y.floor();
    let tx = (x - x0f) as f32;
    let ty = (y - y0f) as f32;
    let col = |k: i64| -> u32 {
        if wrap_x {
            k.rem_euclid(w) as u32
        } else {
            k.clamp(0, w - 1) as u32
        }
    };
    let row = |k: i64| -> u32 { k.clamp(0, h - 1) as u32 };
    let (x0, y0) = (x0f as i64, y0f as i64);
    let p00 = img.get_pixel(col(x0), row(y0)).0;
    let p10 = img.get_pixel(col(x0 + 1), row(y0)).0;
    let p01 = img.get_pixel(col(x0), row(y0 + 1)).0;
    let p11 = img.get_pixel(col(x0 + 1), row(y0 + 1)).0;
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] as f32 + (p10[c] as f32 - p00[c] as f32) * tx;
        let bot = p01[c] as f32 + (p11[c] as f32 - p01[c] as f32) * tx;
        out[c] = top + (bot - top) * ty;
    }
    out
}

pub fn to_rgb8(v: [f32; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

/// Pixels that differ from the fill color.
pub fn content_mask(img: &RgbImage, fill: [u8; 3]) -> Vec<bool> {
    img.pixels().map(|p| p.0 != fill).collect()
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Rotate about the image center by `angle_deg` (counter-clockwise),
/// bilinear, with uncovered pixels set to `fill`. Fill pixels in the source
/// stay fill so masks are not smeared into content.
pub fn rotate(img: &RgbImage, angle_deg: f64, fill: [u8; 3]) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    RgbImage::from_fn(w, h, |i, j| {
        let dx = i as f64 + 0.5 - cx;
        let dy = j as f64 + 0.5 - cy;
        // inverse rotation (image y axis points down)
        let u = cx + c * dx - s * dy;
        let v = cy + s * dx + c * dy;
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            return Rgb(fill);
        }
        let nearest = img.get_pixel(u as u32, v as u32);
        if nearest.0 == fill {
            return Rgb(fill);
        }
        to_rgb8(sample_bilinear(img, u, v, false))
    })
}

/// Brightness/contrast jitter applied to non-fill pixels only.
pub fn photometric(img: &RgbImage, gain: f32, bias: f32, fill: [u8; 3]) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        if p.0 == fill {
            continue;
        }
        let mut v = p.0.map(|c| (c as f32 * gain + bias).round().clamp(0.0, 255.0) as u8);
        // keep content distinguishable from the fill value
        if v == fill {
            v[0] = v[0].wrapping_add(1);
        }
        p.0 = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_wraps_horizontally() {
        let mut img = RgbImage::new(4, 1);
        img.put_pixel(0, 0, Rgb([100, 0, 0]));
        img.put_pixel(3, 0, Rgb([200, 0, 0]));
        // halfway between the last and first column centers
        let v = sample_bilinear(&img, 4.0, 0.5, true);
        assert!((v[0] - 150.0).abs() < 1e-4);
        let clamped = sample_bilinear(&img, 4.0, 0.5, false);
        assert!((clamped[0] - 200.0).abs() < 1e-4);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = RgbImage::from_fn(8, 8, |i, j| Rgb([(i * 30) as u8, (j * 30) as u8, 7]));
        assert_eq!(rotate(&img, 0.0, [128, 128, 128]), img);
    }

    #[test]
    fn photometric_keeps_fill() {
        let fill = [128, 128, 128];
        let mut img = RgbImage::from_pixel(2, 1, Rgb(fill));
        img.put_pixel(1, 0, Rgb([10, 20, 30]));
        let out = photometric(&img, 1.1, 5.0, fill);
        assert_eq!(out.get_pixel(0, 0).0, fill);
        assert_eq!(out.get_pixel(1, 0).0, [16, 27, 38]);
    }
}
