use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};

/// Uniform centre `(y, x)` such that the whole disk of `radius` lies inside
/// the pixel grid.
pub fn draw_occluder_center<R: Rng>(
    height: usize,
    width: usize,
    radius: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "occlusion radius {radius} must be >= 0"
        )));
    }
    let (max_y, max_x) = ((height - 1) as f64 - radius, (width - 1) as f64 - radius);
    if max_y < radius || max_x < radius {
        return Err(Error::InvalidParam(format!(
            "occlusion radius {radius} does not fit in a {height}x{width} image"
        )));
    }
    let cy = if max_y > radius {
        rng.gen_range(radius..=max_y)
    } else {
        radius
    };
    let cx = if max_x > radius {
        rng.gen_range(radius..=max_x)
    } else {
        radius
    };
    Ok((cy, cx))
}

/// Pixelwise minimum with a mask that is zero on the filled disk and one
/// elsewhere: pixels within `radius` of `center` go black in every channel.
pub fn occlude(img: &Image, radius: f64, center: (f64, f64)) -> Image {
    if radius == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    let r2 = radius * radius;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let d2 = (y as f64 - center.0).powi(2) + (x as f64 - center.1).powi(2);
            if d2 <= r2 {
                for c in 0..img.channels() {
                    out.set(y, x, c, 0.0);
                }
            }
        }
    }
    out
}
