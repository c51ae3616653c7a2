//! Direction routing and the directional encoding mask.
//!
//! A word image is classified as horizontal when it is strictly wider than
//! tall; anything else (including squares) is vertical. Vertical images are
//! rotated a quarter turn counterclockwise so their top character becomes
//! the leftmost one, then every image is resized to the network frame and
//! scaled to `[-0.5, 0.5]`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::autograd::Tensor;
use crate::image::GrayImage;

pub const INPUT_HEIGHT: usize = 32;
pub const INPUT_WIDTH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Horizontal,
    Vertical,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
        }
    }

    pub fn is_horizontal(self) -> bool {
        self == Direction::Horizontal
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = RoutingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "horizontal" | "h" => Ok(Direction::Horizontal),
            "vertical" | "v" => Ok(Direction::Vertical),
            other => Err(RoutingError::Argument(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RoutingError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Horizontal iff `width > height`; squares read as vertical.
pub fn decide_direction(width: usize, height: usize) -> Result<Direction, RoutingError> {
    if width == 0 || height == 0 {
        return Err(RoutingError::Argument(format!(
            "image dimensions must be positive, got {width}×{height}"
        )));
    }
    Ok(if width > height {
        Direction::Horizontal
    } else {
        Direction::Vertical
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResizeFilter {
    #[default]
    Bilinear,
    Nearest,
}

/// A recognizer-ready image in the network frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedImage {
    /// `1 × H × W`, values in `[-0.5, 0.5]`.
    pub pixels: Tensor,
    pub direction: Direction,
    /// `(height, width)` of the source image before routing.
    pub original_shape: (usize, usize),
}

impl RoutedImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Decides the direction, rotates vertical inputs, resizes to
/// `height × width` and normalizes.
pub fn route(
    image: &GrayImage,
    (height, width): (usize, usize),
    filter: ResizeFilter,
) -> Result<RoutedImage, RoutingError> {
    if image.is_empty() {
        return Err(RoutingError::Argument("empty image".into()));
    }
    if height == 0 || width == 0 {
        return Err(RoutingError::Argument("empty target frame".into()));
    }
    let direction = decide_direction(image.width(), image.height())?;
    let rotated;
    let upright = match direction {
        Direction::Horizontal => image,
        Direction::Vertical => {
            rotated = image.rotate_ccw();
            &rotated
        }
    };
    let data = resize(upright, height, width, filter)
        .into_iter()
        .map(|v| v / 255.0 - 0.5)
        .collect();
    Ok(RoutedImage {
        pixels: Tensor::new(&[1, height, width], data).expect("resize output size"),
        direction,
        original_shape: (image.height(), image.width()),
    })
}

/// Resamples to `height × width` using pixel-center alignment, so a
/// same-size resize is the identity.
fn resize(image: &GrayImage, height: usize, width: usize, filter: ResizeFilter) -> Vec<f64> {
    let (sw, sh) = (image.width(), image.height());
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let mut out = Vec::with_capacity(width * height);
    match filter {
        ResizeFilter::Nearest => {
            for y in 0..height {
                let src_y = (((y as f64 + 0.5) * sy) as usize).min(sh - 1);
                for x in 0..width {
                    let src_x = (((x as f64 + 0.5) * sx) as usize).min(sw - 1);
                    out.push(image.get(src_x, src_y) as f64);
                }
            }
        }
        ResizeFilter::Bilinear => {
            let taps = |dst: usize, scale: f64, extent: usize| {
                let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(extent - 1);
                (lo, hi, pos - lo as f64)
            };
            let xs: Vec<_> = (0..width).map(|x| taps(x, sx, sw)).collect();
            for y in 0..height {
                let (y0, y1, fy) = taps(y, sy, sh);
                for &(x0, x1, fx) in &xs {
                    let top = image.get(x0, y0) as f64 * (1.0 - fx) + image.get(x1, y0) as f64 * fx;
                    let bottom =
                        image.get(x0, y1) as f64 * (1.0 - fx) + image.get(x1, y1) as f64 * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    out
}

/// Directional encoding mask, `1 × height × width`.
///
/// Column `x` holds `k(π/2 · u)` with `u = x / (width - 1)`: `k = sin` for
/// horizontal text and `cos` for vertical text. `kernel_swap` exchanges
/// the two kernels.
pub fn dem_mask(direction: Direction, height: usize, width: usize, kernel_swap: bool) -> Tensor {
    let use_sin = direction.is_horizontal() != kernel_swap;
    let column: Vec<f64> = (0..width)
        .map(|x| {
            let u = if width > 1 {
                x as f64 / (width - 1) as f64
            } else {
                0.0
            };
            let angle = FRAC_PI_2 * u;
            if use_sin {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(height * width);
    for _ in 0..height {
        data.extend_from_slice(&column);
    }
    Tensor::new(&[1, height, width], data).expect("mask size")
}

/// Network input: the routed pixels, followed by the direction mask as a
/// second channel when `use_dem` is set.
pub fn concat_dem(image: &RoutedImage, use_dem: bool, kernel_swap: bool) -> Tensor {
    let (h, w) = (image.height(), image.width());
    if !use_dem {
        return image.pixels.clone();
    }
    let mask = dem_mask(image.direction, h, w, kernel_swap);
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend_from_slice(image.pixels.data());
    data.extend_from_slice(mask.data());
    Tensor::new(&[2, h, w], data).expect("concat size")
}
