use crate::data::Image;
use crate::error::{Error, Result};

/// Horizontal shift of row `y`: `amplitude * sin(2 pi frequency y / H + phase)`.
pub fn wave_offset(y: usize, height: usize, amplitude: f64, frequency: f64, phase: f64) -> f64 {
    amplitude * (std::f64::consts::TAU * frequency * y as f64 / height as f64 + phase).sin()
}

/// Shifts each row right by its wave offset with linear interpolation and
/// edge clamping.
pub fn wave(img: &Image, amplitude: f64, frequency: f64, phase: f64) -> Result<Image> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "wave amplitude {amplitude} must be >= 0"
        )));
    }
    if !(frequency > 0.0) {
        return Err(Error::InvalidParam(format!(
            "wave frequency {frequency} must be > 0"
        )));
    }
    if amplitude == 0.0 {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    for y in 0..h {
        let shift = wave_offset(y, h, amplitude, frequency, phase);
        for x in 0..w {
            let sx = (x as f64 - shift).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let f = sx - x0 as f64;
            for ch in 0..c {
                let (a, b) = (img.get(y, x0, ch), img.get(y, x1, ch));
                out.set(y, x, ch, (a + f * (b - a)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}
