use serde::{Deserialize, Serialize};

use crate::image::{rgb8, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Triangle,
    Square,
    Cross,
    Hexagon,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Circle,
        ShapeClass::Triangle,
        ShapeClass::Square,
        ShapeClass::Cross,
        ShapeClass::Hexagon,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Square => "square",
            ShapeClass::Cross => "cross",
            ShapeClass::Hexagon => "hexagon",
        }
    }

    /// Whether the pixel whose centre sits at `(u, v)` inside an `s x s`
    /// placement box belongs to the shape. Coordinates are in pixels from the
    /// box's top-left corner.
    pub fn contains(self, u: f64, v: f64, s: f64) -> bool {
        let c = s / 2.0;
        let (dx, dy) = ((u - c).abs(), (v - c).abs());
        match self {
            ShapeClass::Circle => dx * dx + dy * dy <= c * c,
            // apex at the top centre, base along the bottom edge
            ShapeClass::Triangle => dx <= v / 2.0,
            ShapeClass::Square => true,
            ShapeClass::Cross => dx <= s / 6.0 || dy <= s / 6.0,
            ShapeClass::Hexagon => {
                let r = c;
                let k = 3f64.sqrt();
                dy <= k / 2.0 * r && k * dx + dy <= k * r
            }
        }
    }

    /// Rasterizes the shape into an `s x s` boolean stencil (row-major).
    pub fn stencil(self, s: usize) -> Vec<bool> {
        let sf = s as f64;
        let mut out = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                out.push(self.contains(x as f64 + 0.5, y as f64 + 0.5, sf));
            }
        }
        out
    }
}

impl std::fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ShapeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown shape class `{s}`"))
    }
}

pub const BACKGROUND: Rgb = rgb8(128, 128, 128);
pub const PAIR_CIRCLE: Rgb = rgb8(255, 220, 0);
pub const PAIR_TRIANGLE: Rgb = rgb8(30, 60, 230);
pub const FOREGROUND_WHITE: Rgb = rgb8(255, 255, 255);
pub const MASK_BLACK: Rgb = rgb8(0, 0, 0);

/// Distractor colour per class. Yellow and blue are reserved for the
/// context pair so that "yellow circle" and "blue triangle" only ever
/// appear as pair members.
pub fn distractor_color(class: ShapeClass) -> Rgb {
    match class {
        ShapeClass::Circle => rgb8(220, 40, 40),
        ShapeClass::Triangle => rgb8(40, 180, 60),
        ShapeClass::Square => rgb8(200, 50, 200),
        ShapeClass::Cross => rgb8(30, 200, 200),
        ShapeClass::Hexagon => rgb8(240, 140, 30),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteColor {
    Yellow,
    Blue,
    Red,
    Green,
    Magenta,
    Cyan,
    Orange,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 7] = [
        PaletteColor::Yellow,
        PaletteColor::Blue,
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Magenta,
        PaletteColor::Cyan,
        PaletteColor::Orange,
    ];

    pub fn rgb(self) -> Rgb {
        match self {
            PaletteColor::Yellow => PAIR_CIRCLE,
            PaletteColor::Blue => PAIR_TRIANGLE,
            PaletteColor::Red => distractor_color(ShapeClass::Circle),
            PaletteColor::Green => distractor_color(ShapeClass::Triangle),
            PaletteColor::Magenta => distractor_color(ShapeClass::Square),
            PaletteColor::Cyan => distractor_color(ShapeClass::Cross),
            PaletteColor::Orange => distractor_color(ShapeClass::Hexagon),
        }
    }

    pub fn nearest(c: Rgb) -> (PaletteColor, f32) {
        PaletteColor::ALL
            .into_iter()
            .map(|p| (p, crate::image::color_distance(c, p.rgb())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("palette is non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::color_distance;

    #[test]
    fn square_fills_its_box() {
        assert!(ShapeClass::Square.stencil(16).iter().all(|&b| b));
    }

    #[test]
    fn stencils_are_distinct_and_nonempty() {
        for s in [8usize, 12, 16] {
            let st: Vec<_> = ShapeClass::ALL.iter().map(|c| c.stencil(s)).collect();
            for (i, a) in st.iter().enumerate() {
                assert!(a.iter().filter(|&&b| b).count() > s);
                for b in &st[i + 1..] {
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn palette_is_well_separated() {
        for (i, a) in PaletteColor::ALL.iter().enumerate() {
            assert!(color_distance(a.rgb(), BACKGROUND) > 0.4);
            for b in &PaletteColor::ALL[i + 1..] {
                assert!(color_distance(a.rgb(), b.rgb()) > 0.3, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn parse_roundtrip() {
        for c in ShapeClass::ALL {
            assert_eq!(c.name().parse::<ShapeClass>().unwrap(), c);
        }
    }
}
