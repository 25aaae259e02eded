use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    sample_scene_with, ColorTable, ObjectAnnotation, Scene, SceneSpec, FOREGROUND_WHITE,
    MASK_BLACK,
};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::objtok::{BinaryMask, RleMask};
use crate::{par, seed};

pub const GENERATOR_VERSION: &str = concat!("objmim-scenegen/", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub objects: Vec<ObjectAnnotation>,
    pub has_context_pair: bool,
    pub seed: u64,
    /// Ground-truth bottom-right quadrant of a prompt grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `[H, W]`
    pub image_size: [usize; 2],
    pub generator_version: String,
    pub colors: ColorTable,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(&path, json).at(&path)
    }

    /// Loads every entry's image and rebuilds in-memory scenes.
    pub fn load_scenes(&self, dir: &Path) -> Result<Vec<Scene>> {
        let loaded = par::map_slice(&self.entries, |e| -> Result<Scene> {
            let image = Image::load_png(&dir.join(&e.image_path))?;
            for o in &e.objects {
                o.rle.decode()?;
            }
            Ok(Scene {
                image,
                objects: e.objects.clone(),
                has_context_pair: e.has_context_pair,
                seed: e.seed,
            })
        });
        loaded.into_iter().collect()
    }

    pub fn targets(&self) -> Result<Vec<Option<BinaryMask>>> {
        self.entries
            .iter()
            .map(|e| e.target.as_ref().map(RleMask::decode).transpose())
            .collect()
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).at(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn image_rel_path(i: usize) -> String {
    format!("images/{i:06}.png")
}

fn write_entries(
    out_dir: &Path,
    samples: Vec<(Scene, Option<RleMask>)>,
    colors: ColorTable,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir.join("images")).at(out_dir)?;
    let size = samples
        .first()
        .map(|(s, _)| [s.image.height(), s.image.width()]);
    let written = par::map_indexed(samples.len(), |i| {
        let rel = image_rel_path(i);
        samples[i].0.image.save_png(&out_dir.join(&rel)).map(|_| rel)
    });
    let mut entries = Vec::with_capacity(samples.len());
    for (rel, (scene, target)) in written.into_iter().zip(samples) {
        entries.push(ManifestEntry {
            image_path: rel?,
            objects: scene.objects,
            has_context_pair: scene.has_context_pair,
            seed: scene.seed,
            target,
        });
    }
    let manifest = DatasetManifest {
        image_size: size.unwrap_or([0, 0]),
        generator_version: GENERATOR_VERSION.to_string(),
        colors,
        entries,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Per-scene seed for index `i`: `derive(master, [SCENE, i])`.
pub fn scene_seed(master: u64, i: usize) -> u64 {
    seed::derive(master, &[seed::tag::SCENE, i as u64])
}

pub fn generate_scenes(spec: &SceneSpec, n: usize, master: u64) -> Result<Vec<Scene>> {
    spec.validate()?;
    let colors = spec.color_table(master);
    par::map_indexed(n, |i| sample_scene_with(spec, &colors, scene_seed(master, i)))
        .into_iter()
        .collect()
}

pub fn generate_dataset(spec: &SceneSpec, n: usize, master: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let scenes = generate_scenes(spec, n, master)?;
    write_entries(
        out_dir,
        scenes.into_iter().map(|s| (s, None)).collect(),
        spec.color_table(master),
    )
}

fn translate(mask: &BinaryMask, dy: usize, dx: usize, h: usize, w: usize) -> BinaryMask {
    let mut out = BinaryMask::new(h, w);
    let mw = mask.width();
    for i in mask.pixels() {
        out.set(dy + i / mw, dx + i % mw, true);
    }
    out
}

/// Foreground mask of a scene: every object pixel.
pub fn foreground(scene: &Scene) -> BinaryMask {
    let (h, w) = (scene.image.height(), scene.image.width());
    let mut m = BinaryMask::new(h, w);
    for o in &scene.objects {
        for i in o.mask().pixels() {
            m.set(i / w, i % w, true);
        }
    }
    m
}

fn silhouette(fg: &BinaryMask) -> Image {
    let mut img = Image::filled(fg.height(), fg.width(), MASK_BLACK);
    for i in fg.pixels() {
        img.set(i / fg.width(), i % fg.width(), FOREGROUND_WHITE);
    }
    img
}

/// Lays out `example | example mask` over `query | query mask` on a canvas
/// twice the scene side. Annotations cover the scene objects and the white
/// silhouettes; the query foreground is returned separately as the target.
pub fn compose_prompt_grid(example: &Scene, query: &Scene, seed: u64) -> Result<(Scene, BinaryMask)> {
    let s = example.image.height();
    if query.image.height() != s || example.image.width() != s || query.image.width() != s {
        return Err(Error::Shape("prompt-grid scenes must be square and equally sized".into()));
    }
    let side = 2 * s;
    let mut canvas = Image::filled(side, side, MASK_BLACK);
    let fg_ex = foreground(example);
    let fg_q = foreground(query);
    canvas.blit(&example.image, 0, 0);
    canvas.blit(&silhouette(&fg_ex), 0, s);
    canvas.blit(&query.image, s, 0);
    canvas.blit(&silhouette(&fg_q), s, s);

    let mut objects = Vec::new();
    for (scene, dy) in [(example, 0), (query, s)] {
        for o in &scene.objects {
            let m = o.mask();
            for (dx, color) in [(0, o.color), (s, FOREGROUND_WHITE)] {
                let id = objects.len();
                objects.push(ObjectAnnotation::from_mask(
                    id,
                    o.shape,
                    color,
                    &translate(&m, dy, dx, side, side),
                )?);
            }
        }
    }
    Ok((
        Scene {
            image: canvas,
            objects,
            has_context_pair: example.has_context_pair || query.has_context_pair,
            seed,
        },
        fg_q,
    ))
}

pub fn generate_prompt_grids(spec: &SceneSpec, n: usize, master: u64) -> Result<Vec<(Scene, BinaryMask)>> {
    spec.validate()?;
    let colors = spec.color_table(master);
    par::map_indexed(n, |i| {
        let grid_seed = seed::derive(master, &[seed::tag::GRID, i as u64]);
        let ex = sample_scene_with(spec, &colors, seed::derive(grid_seed, &[0]))?;
        let q = sample_scene_with(spec, &colors, seed::derive(grid_seed, &[1]))?;
        compose_prompt_grid(&ex, &q, grid_seed)
    })
    .into_iter()
    .collect()
}

pub fn generate_prompt_grid_dataset(
    spec: &SceneSpec,
    n: usize,
    master: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let grids = generate_prompt_grids(spec, n, master)?;
    write_entries(
        out_dir,
        grids
            .into_iter()
            .map(|(s, t)| (s, Some(RleMask::encode(&t))))
            .collect(),
        spec.color_table(master),
    )
}

pub fn manifest_dir(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|f| f == MANIFEST_FILE) {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}
