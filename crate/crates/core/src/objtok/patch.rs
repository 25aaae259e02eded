use crate::error::{Error, Result};
use crate::image::Image;

/// Non-overlapping `c x c` patches in row-major patch order. Each patch is a
/// flat vector of `c * c * 3` values: pixels row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    grid_h: usize,
    grid_w: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn from_raw(patch_size: usize, grid_h: usize, grid_w: usize, data: Vec<f32>) -> Result<Self> {
        let want = grid_h * grid_w * patch_size * patch_size * 3;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "{}x{} grid of {}px patches needs {} values, got {}",
                grid_h,
                grid_w,
                patch_size,
                want,
                data.len()
            )));
        }
        Ok(Self {
            patch_size,
            grid_h,
            grid_w,
            data,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Total patch count `M`.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.patch_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Geometry helper shared by planners, losses and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {}px patches",
                height, width, patch_size
            )));
        }
        Ok(Self {
            patch_size,
            height,
            width,
        })
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_w() * self.grid_h()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Patch index and pixel offset (in pixels, not values) inside that patch.
    #[inline]
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize) {
        let c = self.patch_size;
        ((y / c) * self.grid_w() + x / c, (y % c) * c + x % c)
    }

    /// Image pixel of offset `off` within patch `p`.
    #[inline]
    pub fn pixel_of(&self, p: usize, off: usize) -> (usize, usize) {
        let c = self.patch_size;
        let (gy, gx) = (p / self.grid_w(), p % self.grid_w());
        (gy * c + off / c, gx * c + off % c)
    }

    /// Patches overlapping the rectangle `(x, y, w, h)`.
    pub fn patches_in_rect(&self, rect: [usize; 4]) -> Vec<usize> {
        let [x, y, w, h] = rect;
        if w == 0 || h == 0 {
            return Vec::new();
        }
        let c = self.patch_size;
        let mut out = Vec::new();
        for gy in y / c..=(y + h - 1) / c {
            for gx in x / c..=(x + w - 1) / c {
                out.push(gy * self.grid_w() + gx);
            }
        }
        out
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    let layout = PatchLayout::new(image.height(), image.width(), patch_size)?;
    let c = patch_size;
    let (gh, gw) = (layout.grid_h(), layout.grid_w());
    let mut data = Vec::with_capacity(image.data().len());
    let src = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..c {
                let start = ((gy * c + py) * image.width() + gx * c) * 3;
                data.extend_from_slice(&src[start..start + c * 3]);
            }
        }
    }
    PatchGrid::from_raw(c, gh, gw, data)
}

pub fn unpatchify(grid: &PatchGrid) -> Result<Image> {
    let c = grid.patch_size;
    let (h, w) = (grid.grid_h * c, grid.grid_w * c);
    if grid.data.len() != h * w * 3 {
        return Err(Error::Shape("patch sequence length does not match grid".into()));
    }
    let mut data = vec![0.0f32; h * w * 3];
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let patch = grid.patch(gy * grid.grid_w + gx);
            for py in 0..c {
                let dst = ((gy * c + py) * w + gx * c) * 3;
                data[dst..dst + c * 3].copy_from_slice(&patch[py * c * 3..(py + 1) * c * 3]);
            }
        }
    }
    Image::from_raw(h, w, data)
}
