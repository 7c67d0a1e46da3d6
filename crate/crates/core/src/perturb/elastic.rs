use rand::Rng;

use super::blur::{convolve_separable, gaussian_kernel};
use crate::data::Image;
use crate::error::{Error, Result};

/// Per-pixel displacement in pixels, row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl DisplacementField {
    pub fn max_norm(&self) -> f64 {
        self.dy
            .iter()
            .zip(&self.dx)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}

/// Uniform `[-1, 1]` noise per pixel and axis, Gaussian-smoothed with `sigma`
/// (edge clamped), rescaled so the largest displacement vector has length
/// one, then scaled by `alpha`.
pub fn elastic_field<R: Rng>(
    height: usize,
    width: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<DisplacementField> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidParam(format!(
            "elastic alpha {alpha} must be >= 0"
        )));
    }
    if alpha > 0.0 && !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!(
            "elastic sigma {sigma} must be > 0 when alpha > 0"
        )));
    }
    let n = height * width;
    let raw_y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let raw_x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let taps = gaussian_kernel(sigma);
    let dy = convolve_separable(&Image::new(height, width, 1, raw_y)?, &taps).into_data();
    let dx = convolve_separable(&Image::new(height, width, 1, raw_x)?, &taps).into_data();
    let mut field = DisplacementField {
        height,
        width,
        dy,
        dx,
    };
    let norm = field.max_norm();
    let scale = if norm > 0.0 { alpha / norm } else { 0.0 };
    for v in field.dy.iter_mut().chain(field.dx.iter_mut()) {
        *v *= scale;
    }
    Ok(field)
}

/// Samples `img` at `(y + dy, x + dx)` with bilinear interpolation; sample
/// coordinates are clamped to the image.
pub fn warp_bilinear(img: &Image, field: &DisplacementField) -> Result<Image> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if field.height != h || field.width != w {
        return Err(Error::Shape(format!(
            "{}x{} field for a {h}x{w} image",
            field.height, field.width
        )));
    }
    let mut out = Image::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = (y as f64 + field.dy[i]).clamp(0.0, (h - 1) as f64);
            let sx = (x as f64 + field.dx[i]).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let (p00, p01) = (img.get(y0, x0, ch), img.get(y0, x1, ch));
                let (p10, p11) = (img.get(y1, x0, ch), img.get(y1, x1, ch));
                let top = p00 + fx * (p01 - p00);
                let bottom = p10 + fx * (p11 - p10);
                out.set(y, x, ch, (top + fy * (bottom - top)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

pub fn elastic<R: Rng>(img: &Image, alpha: f64, sigma: f64, rng: &mut R) -> Result<Image> {
    let field = elastic_field(img.height(), img.width(), alpha, sigma, rng)?;
    if alpha == 0.0 {
        return Ok(img.clone());
    }
    warp_bilinear(img, &field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn zero_alpha_is_identity() {
        let img = Image::new(3, 3, 1, (0..9).map(|i| i as f64 / 9.0).collect()).unwrap();
        assert_eq!(elastic(&img, 0.0, 4.0, &mut rng_for(&[1])).unwrap(), img);
    }

    #[test]
    fn constant_image_is_invariant() {
        let img = Image::filled(10, 12, 3, 0.61);
        for alpha in [0.5, 3.0, 8.0] {
            let out = elastic(&img, alpha, 2.0, &mut rng_for(&[2])).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn displacement_bounded_by_alpha() {
        for seed in 0..20 {
            let f = elastic_field(16, 13, 5.5, 3.0, &mut rng_for(&[seed])).unwrap();
            let m = f.max_norm();
            assert!(m <= 5.5 + 1e-12 && m > 5.5 - 1e-9, "{m}");
        }
    }

    #[test]
    fn sigma_required_when_alpha_positive() {
        assert!(elastic_field(4, 4, 1.0, 0.0, &mut rng_for(&[0])).is_err());
    }
}
