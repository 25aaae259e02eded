//! Colour and shape judge used to score reconstructions.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::image::{color_distance, Image, Rgb};
use crate::scenegen::{sample_scene_with, PaletteColor, SceneSpec, ShapeClass};

/// Pixels farther than this from the background colour count as foreground.
pub const TAU_BG: f32 = 0.2;
/// Largest accepted RGB distance between the mean foreground colour and its
/// nearest palette entry.
pub const TAU_COLOR: f32 = 0.25;
pub const MIN_FILL: f64 = 0.05;
/// Largest accepted moment-feature distance to the nearest shape template.
pub const SHAPE_FLOOR: f64 = 0.05;

const TEMPLATE_SIDES: std::ops::RangeInclusive<usize> = 6..=32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub present: bool,
    pub color_class: Option<PaletteColor>,
    pub shape_class: Option<ShapeClass>,
    pub fill_fraction: f64,
}

/// Scale- and translation-normalized central moments of a binary region.
pub fn moment_features(mask: &[bool], width: usize) -> Option<[f64; 7]> {
    let pts: Vec<(f64, f64)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let orders = [(2, 0), (0, 2), (1, 1), (3, 0), (0, 3), (2, 1), (1, 2)];
    let mut f = [0.0; 7];
    for (k, &(p, q)) in orders.iter().enumerate() {
        let mu: f64 = pts
            .iter()
            .map(|&(x, y)| (x - mx).powi(p) * (y - my).powi(q))
            .sum();
        f[k] = mu / n.powf(1.0 + (p + q) as f64 / 2.0);
    }
    Some(f)
}

fn templates() -> &'static [(ShapeClass, [f64; 7])] {
    static T: OnceLock<Vec<(ShapeClass, [f64; 7])>> = OnceLock::new();
    T.get_or_init(|| {
        let mut v = Vec::new();
        for class in ShapeClass::ALL {
            for s in TEMPLATE_SIDES {
                if let Some(f) = moment_features(&class.stencil(s), s) {
                    v.push((class, f));
                }
            }
        }
        v
    })
}

pub fn classify_shape(mask: &[bool], width: usize) -> Option<ShapeClass> {
    let f = moment_features(mask, width)?;
    let (d, class) = templates()
        .iter()
        .map(|(c, t)| {
            let d = f.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (d, *c)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))?;
    (d < SHAPE_FLOOR).then_some(class)
}

/// Judges the content of the `[x, y, w, h]` region of `image`.
pub fn detect_object_in_region(image: &Image, bbox: [usize; 4], background: Rgb) -> DetectionResult {
    let [x, y, w, h] = bbox;
    let absent = |fill| DetectionResult {
        present: false,
        color_class: None,
        shape_class: None,
        fill_fraction: fill,
    };
    if w == 0 || h == 0 || x + w > image.width() || y + h > image.height() {
        return absent(0.0);
    }
    let mut fg = vec![false; w * h];
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for v in 0..h {
        for u in 0..w {
            let c = image.get(y + v, x + u);
            if color_distance(c, background) > TAU_BG {
                fg[v * w + u] = true;
                count += 1;
                for k in 0..3 {
                    sum[k] += c[k] as f64;
                }
            }
        }
    }
    let fill = count as f64 / (w * h) as f64;
    if fill < MIN_FILL {
        return absent(fill);
    }
    let mean = sum.map(|s| (s / count as f64) as f32);
    let (color, dist) = PaletteColor::nearest(mean);
    DetectionResult {
        present: true,
        color_class: (dist <= TAU_COLOR).then_some(color),
        shape_class: classify_shape(&fg, w),
        fill_fraction: fill,
    }
}

/// Per-class judge accuracy on cleanly rendered objects drawn from `spec`.
/// An object counts as correct when colour and shape both match.
pub fn judge_self_test(spec: &SceneSpec, objects: usize, seed: u64) -> crate::Result<[f64; 5]> {
    let mut hit = [0usize; 5];
    let mut seen = [0usize; 5];
    let colors = spec.color_table(seed);
    let mut i = 0u64;
    while seen.iter().sum::<usize>() < objects {
        let scene = sample_scene_with(spec, &colors, crate::seed::derive(seed, &[i]))?;
        i += 1;
        for o in &scene.objects {
            let Some(class) = o.shape else { continue };
            let d = detect_object_in_region(&scene.image, o.bbox, colors.background);
            seen[class.index()] += 1;
            if d.shape_class == Some(class) && d.color_class == Some(PaletteColor::nearest(o.color).0) {
                hit[class.index()] += 1;
            }
        }
    }
    Ok(std::array::from_fn(|k| {
        if seen[k] == 0 {
            1.0
        } else {
            hit[k] as f64 / seen[k] as f64
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{BACKGROUND, PAIR_TRIANGLE};

    #[test]
    fn clean_blue_triangle() {
        let mut img = Image::filled(32, 32, BACKGROUND);
        let st = ShapeClass::Triangle.stencil(12);
        for v in 0..12 {
            for u in 0..12 {
                if st[v * 12 + u] {
                    img.set(5 + v, 7 + u, PAIR_TRIANGLE);
                }
            }
        }
        let d = detect_object_in_region(&img, [7, 5, 12, 12], BACKGROUND);
        assert!(d.present);
        assert_eq!(d.color_class, Some(PaletteColor::Blue));
        assert_eq!(d.shape_class, Some(ShapeClass::Triangle));
    }

    #[test]
    fn background_is_absent() {
        let img = Image::filled(16, 16, BACKGROUND);
        let d = detect_object_in_region(&img, [2, 2, 8, 8], BACKGROUND);
        assert!(!d.present);
        assert_eq!((d.color_class, d.shape_class), (None, None));
    }
}
