use rand::Rng;

use super::glyphs::GlyphSet;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::routing::Direction;

pub const GLYPH_SPACING: usize = 1;
pub const MARGIN: usize = 2;

const BACKGROUND: f64 = 220.0;
const INK: f64 = 30.0;

/// Augmentation switches and magnitude ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub affine: bool,
    pub contrast: bool,
    pub noise: bool,
    /// Rotation drawn from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Horizontal shear drawn from `±max_shear`.
    pub max_shear: f64,
    pub scale_range: (f64, f64),
    /// Linear gain around mid-gray.
    pub gain_range: (f64, f64),
    /// Additive uniform noise in `±noise_amplitude` gray levels.
    pub noise_amplitude: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            affine: true,
            contrast: true,
            noise: true,
            max_rotation_deg: 5.0,
            max_shear: 0.1,
            scale_range: (0.9, 1.1),
            gain_range: (0.7, 1.3),
            noise_amplitude: 10.0,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation {
            affine: false,
            contrast: false,
            noise: false,
            ..Augmentation::default()
        }
    }
}

/// How glyphs are arranged in a vertical word.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VerticalLayout {
    /// The horizontal rendering turned 90° clockwise; extents are transposed.
    #[default]
    Rotated,
    /// Upright glyphs stacked top to bottom, as on signage.
    Stacked,
}

impl VerticalLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            VerticalLayout::Stacked => "stacked",
            VerticalLayout::Rotated => "rotated",
        }
    }
}

impl std::str::FromStr for VerticalLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacked" => Ok(VerticalLayout::Stacked),
            "rotated" => Ok(VerticalLayout::Rotated),
            _ => Err(Error::Argument(format!("unknown vertical layout {s:?}"))),
        }
    }
}

/// Canvas extents `(width, height)` for a label of `n` glyphs.
pub fn layout_size(
    n: usize,
    direction: Direction,
    layout: VerticalLayout,
    glyphs: &GlyphSet,
) -> (usize, usize) {
    let along = |extent: usize| n * extent + n.saturating_sub(1) * GLYPH_SPACING + 2 * MARGIN;
    let horizontal = (along(glyphs.width()), glyphs.height() + 2 * MARGIN);
    match (direction, layout) {
        (Direction::Horizontal, _) => horizontal,
        (Direction::Vertical, VerticalLayout::Stacked) => {
            (glyphs.width() + 2 * MARGIN, along(glyphs.height()))
        }
        (Direction::Vertical, VerticalLayout::Rotated) => (horizontal.1, horizontal.0),
    }
}

/// Renders with the default (rotated) vertical layout.
pub fn render_word<R: Rng + ?Sized>(
    label: &str,
    direction: Direction,
    glyphs: &GlyphSet,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<GrayImage> {
    render_word_with(label, direction, VerticalLayout::default(), glyphs, aug, rng)
}

/// Composites glyphs left-to-right (horizontal) or top-to-bottom
/// (vertical), then applies the enabled augmentations.
pub fn render_word_with<R: Rng + ?Sized>(
    label: &str,
    direction: Direction,
    layout: VerticalLayout,
    glyphs: &GlyphSet,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<GrayImage> {
    if label.is_empty() {
        return Err(Error::Argument("cannot render an empty label".into()));
    }
    if let Some(c) = label.chars().find(|&c| !glyphs.contains(c)) {
        return Err(Error::Argument(format!("no glyph for symbol {c:?}")));
    }
    let n = label.chars().count();
    let stacked = direction == Direction::Vertical && layout == VerticalLayout::Stacked;
    let (w, h) = layout_size(
        n,
        if stacked { direction } else { Direction::Horizontal },
        layout,
        glyphs,
    );
    let mut canvas = vec![BACKGROUND; w * h];
    for (k, c) in label.chars().enumerate() {
        let (ox, oy) = if stacked {
            (MARGIN, MARGIN + k * (glyphs.height() + GLYPH_SPACING))
        } else {
            (MARGIN + k * (glyphs.width() + GLYPH_SPACING), MARGIN)
        };
        for y in 0..glyphs.height() {
            for x in 0..glyphs.width() {
                if glyphs.ink(c, x, y) == Some(true) {
                    canvas[(oy + y) * w + ox + x] = INK;
                }
            }
        }
    }
    let (w, h, mut canvas) = if direction == Direction::Vertical && !stacked {
        // Clockwise: source (x, y) lands at (h - 1 - y, x).
        let mut turned = vec![BACKGROUND; w * h];
        for y in 0..h {
            for x in 0..w {
                turned[x * h + (h - 1 - y)] = canvas[y * w + x];
            }
        }
        (h, w, turned)
    } else {
        (w, h, canvas)
    };

    if aug.affine {
        canvas = affine_jitter(&canvas, w, h, aug, rng);
    }
    if aug.contrast {
        let gain = rng.random_range(aug.gain_range.0..=aug.gain_range.1);
        for v in &mut canvas {
            *v = 128.0 + gain * (*v - 128.0);
        }
    }
    if aug.noise && aug.noise_amplitude > 0.0 {
        for v in &mut canvas {
            *v += rng.random_range(-aug.noise_amplitude..=aug.noise_amplitude);
        }
    }
    let pixels = canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(GrayImage::new(w, h, pixels).expect("canvas size"))
}

/// Rotation, shear and scale about the canvas centre, resampled bilinearly;
/// uncovered pixels take the background value. Extents are unchanged.
fn affine_jitter<R: Rng + ?Sized>(
    src: &[f64],
    w: usize,
    h: usize,
    aug: &Augmentation,
    rng: &mut R,
) -> Vec<f64> {
    let theta = rng
        .random_range(-aug.max_rotation_deg..=aug.max_rotation_deg)
        .to_radians();
    let shear = rng.random_range(-aug.max_shear..=aug.max_shear);
    let scale = rng.random_range(aug.scale_range.0..=aug.scale_range.1);
    // forward = scale · R(theta) · [[1, shear], [0, 1]]
    let (s, c) = theta.sin_cos();
    let a = [
        [scale * c, scale * (c * shear - s)],
        [scale * s, scale * (s * shear + c)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            BACKGROUND
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = vec![BACKGROUND; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
            let bottom = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
            out[y * w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::decide_direction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_arithmetic() {
        let g = GlyphSet::default();
        // 5·3 + 1·2 + 2·2 = 21 wide, 7 + 2·2 = 11 tall
        assert_eq!(layout_size(3, Direction::Horizontal, VerticalLayout::Stacked, &g), (21, 11));
        // Upright glyphs stacked: 5 + 4 wide, 7·3 + 2 + 4 tall
        assert_eq!(layout_size(3, Direction::Vertical, VerticalLayout::Stacked, &g), (9, 27));
        assert_eq!(layout_size(3, Direction::Vertical, VerticalLayout::Rotated, &g), (11, 21));
        let img = render_word("abc", Direction::Horizontal, &g, &Augmentation::none(), &mut rand::rng()).unwrap();
        assert_eq!((img.width(), img.height()), (21, 11));
        let img = render_word_with("abc", Direction::Vertical, VerticalLayout::Stacked, &g, &Augmentation::none(), &mut rand::rng()).unwrap();
        assert_eq!((img.width(), img.height()), (9, 27));
        let img = render_word("abc", Direction::Vertical, &g, &Augmentation::none(), &mut rand::rng()).unwrap();
        assert_eq!((img.width(), img.height()), (11, 21));
    }

    #[test]
    fn rotated_layout_routes_back_to_the_horizontal_rendering() {
        let g = GlyphSet::default();
        let none = Augmentation::none();
        let flat = render_word("k2q", Direction::Horizontal, &g, &none, &mut rand::rng()).unwrap();
        let turned = render_word_with("k2q", Direction::Vertical, VerticalLayout::Rotated, &g, &none, &mut rand::rng()).unwrap();
        assert_eq!(turned.rotate_ccw(), flat);
    }

    #[test]
    fn aspect_matches_direction_from_three_glyphs() {
        let g = GlyphSet::default();
        for n in 1..=20 {
            for dir in [Direction::Horizontal, Direction::Vertical] {
                for layout in [VerticalLayout::Stacked, VerticalLayout::Rotated] {
                    let (w, h) = layout_size(n, dir, layout, &g);
                    if n >= 3 {
                        assert_eq!(decide_direction(w, h).unwrap(), dir);
                    }
                }
            }
        }
    }

    #[test]
    fn glyph_pixels_land_in_their_cells() {
        let g = GlyphSet::default();
        let img = render_word_with("i7", Direction::Vertical, VerticalLayout::Stacked, &g, &Augmentation::none(), &mut rand::rng()).unwrap();
        for (k, c) in "i7".chars().enumerate() {
            for y in 0..7 {
                for x in 0..5 {
                    let px = img.get(MARGIN + x, MARGIN + k * 8 + y);
                    let ink = g.ink(c, x, y).unwrap();
                    assert_eq!(px, if ink { INK as u8 } else { BACKGROUND as u8 });
                }
            }
        }
    }

    #[test]
    fn deterministic_without_augmentation() {
        let g = GlyphSet::default();
        let a = render_word("q9z", Direction::Horizontal, &g, &Augmentation::none(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = render_word("q9z", Direction::Horizontal, &g, &Augmentation::none(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let aug = Augmentation::default();
        let c = render_word("q9z", Direction::Vertical, &g, &aug, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let d = render_word("q9z", Direction::Vertical, &g, &aug, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let g = GlyphSet::default();
        assert!(render_word("a#b", Direction::Horizontal, &g, &Augmentation::none(), &mut rand::rng()).is_err());
        assert!(render_word("", Direction::Horizontal, &g, &Augmentation::none(), &mut rand::rng()).is_err());
    }

    #[test]
    fn augmentation_is_bounded() {
        let g = GlyphSet::default();
        let aug = Augmentation {
            affine: false,
            contrast: false,
            ..Augmentation::default()
        };
        let clean = render_word("abc123", Direction::Horizontal, &g, &Augmentation::none(), &mut rand::rng()).unwrap();
        for seed in 0..20 {
            let noisy = render_word("abc123", Direction::Horizontal, &g, &aug, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (a, b) in clean.pixels().iter().zip(noisy.pixels()) {
                assert!((*a as i32 - *b as i32).abs() <= 10);
            }
        }
    }
}
