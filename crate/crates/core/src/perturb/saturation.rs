use crate::data::Image;
use crate::error::{Error, Result};

/// Rec. 601 luma. Achromatic pixels map to their own value exactly.
pub fn luminance(px: &[f64]) -> f64 {
    match px {
        [v] => *v,
        [r, g, b] if r == g && g == b => *r,
        [r, g, b] => 0.299 * r + 0.587 * g + 0.114 * b,
        _ => px.iter().sum::<f64>() / px.len() as f64,
    }
}

/// `(1 - mix) * gray + mix * x`, evaluated as `gray + mix * (x - gray)`.
pub fn saturate(img: &Image, mix: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::InvalidParam(format!(
            "saturation mix {mix} outside [0, 1]"
        )));
    }
    if mix == 1.0 || img.channels() == 1 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    let c = img.channels();
    for (src, dst) in img
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        let gray = luminance(src);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (gray + mix * (s - gray)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_one_is_identity() {
        let img = Image::new(1, 2, 3, vec![0.9, 0.1, 0.3, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(saturate(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn gray_image_is_a_fixed_point() {
        let img = Image::new(
            1,
            3,
            3,
            vec![0.2, 0.2, 0.2, 0.77, 0.77, 0.77, 1.0, 1.0, 1.0],
        )
        .unwrap();
        for mix in [0.0, 0.13, 0.5, 0.99, 1.0] {
            assert_eq!(saturate(&img, mix).unwrap(), img);
        }
    }

    #[test]
    fn half_mix_on_pure_red() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let out = saturate(&img, 0.5).unwrap();
        let expected = [0.6495, 0.1495, 0.1495];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn out_of_range_mix_rejected() {
        let img = Image::filled(1, 1, 3, 0.5);
        assert!(saturate(&img, 1.01).is_err());
        assert!(saturate(&img, -0.1).is_err());
    }
}
