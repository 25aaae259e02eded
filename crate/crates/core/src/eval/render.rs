use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::image::{rgb8, Image};
use crate::objtok::MaskPlan;

const GAP: usize = 2;
const MID_GRAY: [f32; 3] = [0.5, 0.5, 0.5];
const SEPARATOR: [f32; 3] = rgb8(255, 255, 255);

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub caption: String,
    pub input: Image,
    pub masked_input: Image,
    pub reconstruction: Image,
    pub ground_truth: Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelIndex {
    pub columns: Vec<String>,
    pub panels: Vec<(String, String)>,
}

/// Copy of `image` with every masked patch painted mid-gray.
pub fn masked_input(image: &Image, plan: &MaskPlan, patch_size: usize) -> Image {
    let mut out = image.clone();
    let gw = image.width() / patch_size;
    for &p in &plan.masked_idx {
        let (gy, gx) = (p / gw, p % gw);
        for y in 0..patch_size {
            for x in 0..patch_size {
                out.set(gy * patch_size + y, gx * patch_size + x, MID_GRAY);
            }
        }
    }
    out
}

/// `input | masked input | reconstruction | ground truth`, separated by
/// white bars.
pub fn panel_image(p: &Panel) -> Image {
    let parts = [&p.input, &p.masked_input, &p.reconstruction, &p.ground_truth];
    let h = parts.iter().map(|i| i.height()).max().unwrap_or(0);
    let w: usize = parts.iter().map(|i| i.width()).sum::<usize>() + GAP * (parts.len() - 1);
    let mut out = Image::filled(h, w, SEPARATOR);
    let mut x = 0;
    for img in parts {
        out.blit(img, 0, x);
        x += img.width() + GAP;
    }
    out
}

/// Writes `panel_NNN.png` per panel and an `index.json` listing them.
pub fn render_report(panels: &[Panel], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut files = Vec::with_capacity(panels.len());
    let mut index = PanelIndex {
        columns: ["input", "masked_input", "reconstruction", "ground_truth"]
            .map(String::from)
            .to_vec(),
        panels: Vec::new(),
    };
    for (i, p) in panels.iter().enumerate() {
        let name = format!("panel_{i:03}.png");
        let path = out_dir.join(&name);
        panel_image(p).save_png(&path)?;
        index.panels.push((name, p.caption.clone()));
        files.push(path);
    }
    let ip = out_dir.join("index.json");
    fs::write(&ip, serde_json::to_vec_pretty(&index)?).at(&ip)?;
    files.push(ip);
    Ok(files)
}
