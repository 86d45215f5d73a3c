//! Rotation augmentation about the image centre.

use rand::Rng;

use crate::dishgen::OUTSIDE_COLOR;
use crate::mask::LabelMask;
use crate::netpbm::RgbImage;

pub const FILL_COLOR: [u8; 3] = [OUTSIDE_COLOR[0] as u8, OUTSIDE_COLOR[1] as u8, OUTSIDE_COLOR[2] as u8];

/// Uniform angle in [0, 360) degrees.
pub fn sample_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..360.0)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-12 {
        r
    } else {
        v
    }
}

/// Rotates image (bilinear) and mask (nearest neighbour) counter-clockwise by
/// `angle_degrees` about the centre `((w-1)/2, (h-1)/2)`. Samples falling
/// outside the source get [`FILL_COLOR`] and the background label. Multiples
/// of 90 degrees on square canvases are exact index permutations.
pub fn rotate_augment(image: &RgbImage, mask: &LabelMask, angle_degrees: f64) -> (RgbImage, LabelMask) {
    let (h, w) = (image.height(), image.width());
    assert_eq!((h, w), (mask.height(), mask.width()), "image and mask sizes differ");
    let theta = angle_degrees.to_radians();
    let (sin, cos) = (snap(theta.sin()), snap(theta.cos()));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out_img = RgbImage::filled(h, w, FILL_COLOR);
    let mut out_mask = LabelMask::background(h, w);
    let src = image.data();
    let labels = mask.labels();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse rotation maps the output pixel back into the source.
            let sx = snap(cos * dx + sin * dy + cx);
            let sy = snap(-sin * dx + cos * dy + cy);

            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                let l = labels[ny as usize * w + nx as usize];
                out_mask.set(y, x, crate::mask::Class::from_label(l).expect("valid mask"));
            }

            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let sample = |xx: f64, yy: f64, c: usize| -> f64 {
                if xx < 0.0 || yy < 0.0 || xx as usize >= w || yy as usize >= h {
                    FILL_COLOR[c] as f64
                } else {
                    src[(yy as usize * w + xx as usize) * 3 + c] as f64
                }
            };
            let mut rgb = [0u8; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let top = sample(x0, y0, c) * (1.0 - fx) + if fx > 0.0 { sample(x0 + 1.0, y0, c) * fx } else { 0.0 };
                let bottom = if fy > 0.0 {
                    sample(x0, y0 + 1.0, c) * (1.0 - fx)
                        + if fx > 0.0 { sample(x0 + 1.0, y0 + 1.0, c) * fx } else { 0.0 }
                } else {
                    0.0
                };
                *v = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out_img.put(y, x, rgb);
        }
    }
    (out_img, out_mask)
}
