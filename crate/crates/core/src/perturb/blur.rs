use crate::data::Image;
use crate::error::{Error, Result};

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable edge-clamped convolution of every channel with `taps`.
pub(crate) fn convolve_separable(img: &Image, taps: &[f64]) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = (taps.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sx = clamp(x as isize + k as isize - r, w);
                    acc += t * img.get(y, sx, ch);
                }
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Image::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sy = clamp(y as isize + k as isize - r, h);
                    acc += t * tmp.get(sy, x, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "blur sigma {sigma} must be >= 0"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut out = convolve_separable(img, &gaussian_kernel(sigma));
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c)
            .map(|i| ((i * 53) % 97) as f64 / 96.0)
            .collect();
        Image::new(h, w, c, data).unwrap()
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn dense_oracle(img: &Image, sigma: f64) -> Image {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        let mut total = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let wgt = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                weights.push((dy, dx, wgt));
                total += wgt;
            }
        }
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut out = Image::filled(h, w, c, 0.0);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for &(dy, dx, wgt) in &weights {
                        let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += wgt / total * img.get(sy, sx, ch);
                    }
                    out.set(y as usize, x as usize, ch, acc);
                }
            }
        }
        out
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = ramp(6, 7, 3);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn kernel_is_normalized_with_expected_radius() {
        for sigma in [0.3, 1.0, 2.2] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_image_unchanged() {
        let img = Image::filled(9, 9, 3, 0.37);
        let out = gaussian_blur(&img, 1.7).unwrap();
        assert!(out.linf_distance(&img) < 1e-15);
    }

    #[test]
    fn separable_matches_dense_convolution() {
        let img = ramp(11, 9, 3);
        for sigma in [0.4, 1.0, 2.5] {
            let sep = gaussian_blur(&img, sigma).unwrap();
            let dense = dense_oracle(&img, sigma);
            assert!(sep.linf_distance(&dense) < 1e-10, "sigma {sigma}");
        }
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(gaussian_blur(&ramp(4, 4, 1), -1.0).is_err());
    }
}
