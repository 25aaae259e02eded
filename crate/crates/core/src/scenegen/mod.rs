//! Procedural toy scenes: flat-colour shapes on a uniform background, with
//! per-object masks. A yellow circle and a blue triangle form the context
//! pair and always appear together; the remaining objects are distractors.

mod dataset;
mod shapes;

pub use dataset::{
    compose_prompt_grid, foreground, generate_dataset, generate_prompt_grid_dataset,
    generate_prompt_grids, generate_scenes, load_manifest, manifest_dir, scene_seed,
    DatasetManifest, ManifestEntry, GENERATOR_VERSION, MANIFEST_FILE,
};
pub use shapes::{
    distractor_color, PaletteColor, ShapeClass, BACKGROUND, FOREGROUND_WHITE, MASK_BLACK,
    PAIR_CIRCLE, PAIR_TRIANGLE,
};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::objtok::{BinaryMask, RleMask};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorTable {
    pub background: Rgb,
    /// Colours of the pair circle and pair triangle.
    pub pair: [Rgb; 2],
    /// Distractor colour, indexed by [`ShapeClass::index`].
    pub distractors: [Rgb; 5],
}

impl Default for ColorTable {
    fn default() -> Self {
        Self {
            background: BACKGROUND,
            pair: [PAIR_CIRCLE, PAIR_TRIANGLE],
            distractors: ShapeClass::ALL.map(distractor_color),
        }
    }
}

impl ColorTable {
    /// Reassigns the seven palette colours to pair and distractor roles. The
    /// assignment is fixed for a given seed, so the pair keeps one consistent
    /// colour pairing across a dataset.
    pub fn randomized(seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::tag::SCENE, u64::MAX]);
        let mut pal = PaletteColor::ALL.map(PaletteColor::rgb);
        pal.shuffle(&mut rng);
        Self {
            background: BACKGROUND,
            pair: [pal[0], pal[1]],
            distractors: [pal[2], pal[3], pal[4], pal[5], pal[6]],
        }
    }

    pub fn pair_color(&self, class: ShapeClass) -> Option<Rgb> {
        match class {
            ShapeClass::Circle => Some(self.pair[0]),
            ShapeClass::Triangle => Some(self.pair[1]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive `[min, max]` object count, pair members included.
    pub object_count: [usize; 2],
    pub pair_probability: f64,
    pub colors: ColorTable,
    pub color_randomize: bool,
    /// Inclusive `[min, max]` placement-box side in pixels. Zero means
    /// `[image_size / 8, image_size / 4]`.
    pub side_range: [usize; 2],
    /// Placement boxes snap to multiples of this many pixels (1 = anywhere).
    pub placement_grid: usize,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            object_count: [2, 3],
            pair_probability: 1.0,
            colors: ColorTable::default(),
            color_randomize: false,
            side_range: [8, 8],
            placement_grid: 8,
            max_attempts: 1000,
        }
    }
}

impl SceneSpec {
    pub fn sides(&self) -> [usize; 2] {
        if self.side_range == [0, 0] {
            [self.image_size / 8, self.image_size / 4]
        } else {
            self.side_range
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} is below 32", self.image_size));
        }
        let [lo, hi] = self.object_count;
        if lo < 2 || hi > 8 || lo > hi {
            return bad(format!("object_count [{lo}, {hi}] must lie within [2, 8]"));
        }
        if !(0.0..=1.0).contains(&self.pair_probability) {
            return bad(format!("pair_probability {} outside [0, 1]", self.pair_probability));
        }
        let [s0, s1] = self.sides();
        if s0 < 3 || s0 > s1 || s1 > self.image_size {
            return bad(format!("side range [{s0}, {s1}] is invalid"));
        }
        if self.placement_grid == 0 {
            return bad("placement_grid must be positive".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    pub fn color_table(&self, master_seed: u64) -> ColorTable {
        if self.color_randomize {
            ColorTable::randomized(master_seed)
        } else {
            self.colors.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: usize,
    /// `None` when the annotation came from a class-agnostic backend.
    pub shape: Option<ShapeClass>,
    pub color: Rgb,
    /// `[x, y, w, h]`, tight around the mask.
    pub bbox: [usize; 4],
    pub rle: RleMask,
}

impl ObjectAnnotation {
    pub fn from_mask(id: usize, shape: Option<ShapeClass>, color: Rgb, mask: &BinaryMask) -> Result<Self> {
        let bbox = mask.bbox().ok_or(Error::ZeroSizeObject(id))?;
        Ok(Self {
            id,
            shape,
            color,
            bbox,
            rle: RleMask::encode(mask),
        })
    }

    pub fn mask(&self) -> BinaryMask {
        self.rle
            .decode()
            .expect("annotation RLE is validated on construction and load")
    }

    /// `s_j`, the object's size in pixels.
    pub fn pixel_count(&self) -> usize {
        self.rle.area()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<ObjectAnnotation>,
    pub has_context_pair: bool,
    pub seed: u64,
}

impl Scene {
    /// Index of the pair circle and pair triangle in `objects`.
    pub fn pair_indices(&self, colors: &ColorTable) -> Option<(usize, usize)> {
        let find = |class: ShapeClass| {
            let want = colors.pair_color(class)?;
            self.objects
                .iter()
                .position(|o| o.shape == Some(class) && o.color == want)
        };
        Some((find(ShapeClass::Circle)?, find(ShapeClass::Triangle)?))
    }
}

/// Placement box of one object before rasterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub class: ShapeClass,
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl Placement {
    fn overlaps(&self, other: &Placement, gap: usize) -> bool {
        self.x < other.x + other.side + gap
            && other.x < self.x + self.side + gap
            && self.y < other.y + other.side + gap
            && other.y < self.y + self.side + gap
    }

    pub fn mask(&self, height: usize, width: usize) -> BinaryMask {
        let mut m = BinaryMask::new(height, width);
        let st = self.class.stencil(self.side);
        for v in 0..self.side {
            for u in 0..self.side {
                if st[v * self.side + u] {
                    m.set(self.y + v, self.x + u, true);
                }
            }
        }
        m
    }
}

/// Empty rows and columns kept between placement boxes so that neighbouring
/// objects never touch.
const GAP: usize = 1;

pub fn sample_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    sample_scene_with(spec, &spec.colors, seed)
}

pub fn sample_scene_with(spec: &SceneSpec, colors: &ColorTable, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[seed::tag::SCENE]);
    let n = rng.gen_range(spec.object_count[0]..=spec.object_count[1]);
    let with_pair = rng.gen_bool(spec.pair_probability);

    let mut roles: Vec<(ShapeClass, Rgb)> = Vec::with_capacity(n);
    if with_pair {
        roles.push((ShapeClass::Circle, colors.pair[0]));
        roles.push((ShapeClass::Triangle, colors.pair[1]));
    }
    while roles.len() < n {
        let class = ShapeClass::ALL[rng.gen_range(0..5)];
        roles.push((class, colors.distractors[class.index()]));
    }

    let size = spec.image_size;
    let [s0, s1] = spec.sides();
    let g = spec.placement_grid;
    let mut placed: Vec<Placement> = Vec::with_capacity(n);
    for (k, &(class, _)) in roles.iter().enumerate() {
        let mut ok = None;
        for _ in 0..spec.max_attempts {
            let side = rng.gen_range(s0..=s1);
            let slots = (size - side) / g;
            let p = Placement {
                class,
                x: rng.gen_range(0..=slots) * g,
                y: rng.gen_range(0..=slots) * g,
                side,
            };
            if placed.iter().all(|q| !p.overlaps(q, GAP)) {
                ok = Some(p);
                break;
            }
        }
        placed.push(ok.ok_or(Error::Placement {
            object: k,
            attempts: spec.max_attempts,
        })?);
    }

    render_placements(size, colors, &placed, &roles, with_pair, seed)
}

fn render_placements(
    size: usize,
    colors: &ColorTable,
    placed: &[Placement],
    roles: &[(ShapeClass, Rgb)],
    has_context_pair: bool,
    seed: u64,
) -> Result<Scene> {
    let mut objects = Vec::with_capacity(placed.len());
    for (id, (p, &(class, color))) in placed.iter().zip(roles).enumerate() {
        objects.push(ObjectAnnotation::from_mask(id, Some(class), color, &p.mask(size, size))?);
    }
    let scene = Scene {
        image: Image::filled(size, size, colors.background),
        objects,
        has_context_pair,
        seed,
    };
    Ok(Scene {
        image: render_scene(&scene, colors.background),
        ..scene
    })
}

/// Paints every object's mask in its colour over a flat background.
pub fn render_scene(scene: &Scene, background: Rgb) -> Image {
    let (h, w) = (scene.image.height(), scene.image.width());
    let mut img = Image::filled(h, w, background);
    for o in &scene.objects {
        let m = o.mask();
        for i in m.pixels() {
            img.set(i / w, i % w, o.color);
        }
    }
    img
}

/// Builds a scene directly from explicit placements (used by tests and the
/// prompt-grid composer).
pub fn scene_from_placements(
    size: usize,
    colors: &ColorTable,
    placements: &[(Placement, Rgb)],
    seed: u64,
) -> Result<Scene> {
    let placed: Vec<Placement> = placements.iter().map(|p| p.0).collect();
    let roles: Vec<(ShapeClass, Rgb)> = placements.iter().map(|(p, c)| (p.class, *c)).collect();
    let has_pair = {
        let has = |cls: ShapeClass| roles.iter().any(|&(k, c)| k == cls && Some(c) == colors.pair_color(cls));
        has(ShapeClass::Circle) && has(ShapeClass::Triangle)
    };
    render_placements(size, colors, &placed, &roles, has_pair, seed)
}
