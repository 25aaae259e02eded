use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::rle::BinaryMask;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenegen::ObjectAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum TokenizerBackend {
    /// Annotations from the dataset manifest, passed through unchanged.
    #[default]
    Oracle,
    /// Colour quantization followed by 4-connected labelling.
    ConnectedComponents { levels: u8, min_area: usize },
}


impl TokenizerBackend {
    pub fn connected_components() -> Self {
        Self::ConnectedComponents {
            levels: 8,
            min_area: 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::ConnectedComponents { .. } => "connected_components",
        }
    }
}

#[inline]
pub fn quantize_key(c: [f32; 3], levels: u8) -> u32 {
    let l = levels.max(1) as f32;
    let q = |v: f32| ((v.clamp(0.0, 1.0) * l).floor() as u32).min(levels as u32 - 1);
    (q(c[0]) << 16) | (q(c[1]) << 8) | q(c[2])
}

pub fn extract_objects(
    image: &Image,
    backend: &TokenizerBackend,
    annotations: Option<&[ObjectAnnotation]>,
) -> Result<Vec<ObjectAnnotation>> {
    match *backend {
        TokenizerBackend::Oracle => annotations
            .map(<[ObjectAnnotation]>::to_vec)
            .ok_or(Error::MissingAnnotations),
        TokenizerBackend::ConnectedComponents { levels, min_area } => {
            Ok(connected_components(image, levels, min_area))
        }
    }
}

fn connected_components(image: &Image, levels: u8, min_area: usize) -> Vec<ObjectAnnotation> {
    let (h, w) = (image.height(), image.width());
    let keys: Vec<u32> = (0..h * w)
        .map(|i| quantize_key(image.get(i / w, i % w), levels))
        .collect();
    let mut hist: HashMap<u32, usize> = HashMap::new();
    for &k in &keys {
        *hist.entry(k).or_default() += 1;
    }
    let Some(background) = hist
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&k, _)| k)
    else {
        return Vec::new();
    };

    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if keys[start] == background || label[start] != usize::MAX {
            continue;
        }
        let key = keys[start];
        let comp = out.len();
        let mut members = Vec::new();
        label[start] = comp;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if label[j] == usize::MAX && keys[j] == key {
                    label[j] = comp;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if members.len() < min_area {
            // keep the label so the pixels are not revisited
            continue;
        }
        let mut mask = BinaryMask::new(h, w);
        let mut sum = [0f64; 3];
        for &i in &members {
            mask.set(i / w, i % w, true);
            let c = image.get(i / w, i % w);
            for k in 0..3 {
                sum[k] += c[k] as f64;
            }
        }
        let n = members.len() as f64;
        let color = sum.map(|s| (s / n) as f32);
        let id = out.len();
        out.push(
            ObjectAnnotation::from_mask(id, None, color, &mask)
                .expect("component has at least one pixel"),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{sample_scene, SceneSpec};

    #[test]
    fn uniform_image_has_no_objects() {
        let img = Image::filled(32, 32, [0.5; 3]);
        let objs = extract_objects(&img, &TokenizerBackend::connected_components(), None).unwrap();
        assert!(objs.is_empty());
    }

    #[test]
    fn oracle_requires_annotations() {
        let img = Image::filled(32, 32, [0.5; 3]);
        assert!(matches!(
            extract_objects(&img, &TokenizerBackend::Oracle, None),
            Err(Error::MissingAnnotations)
        ));
    }

    #[test]
    fn recovers_scene_objects() {
        let s = sample_scene(&SceneSpec::default(), 11).unwrap();
        let objs = extract_objects(&s.image, &TokenizerBackend::connected_components(), None).unwrap();
        assert_eq!(objs.len(), s.objects.len());
        for o in &s.objects {
            let m = o.mask();
            let best = objs.iter().map(|c| c.mask().iou(&m)).fold(0.0, f64::max);
            assert!(best >= 0.99);
        }
    }
}
