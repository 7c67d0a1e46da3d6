use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Image;
use crate::error::{Error, Result};

/// `clip(x + n)` with `n ~ N(0, sigma^2)` drawn per pixel and channel.
pub fn gaussian_noise<R: Rng>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "noise sigma {sigma} must be >= 0"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}
