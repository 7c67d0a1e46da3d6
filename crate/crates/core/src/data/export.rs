use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

fn to_bytes(img: &Image) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn check_channels(img: &Image) -> Result<()> {
    match img.channels() {
        1 | 3 => Ok(()),
        c => Err(Error::InvalidParam(format!(
            "can only export 1- or 3-channel images, got {c}"
        ))),
    }
}

/// Binary netpbm: P6 for RGB, P5 for single-channel images, maxval 255.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    check_channels(img)?;
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(to_bytes(img));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace (comments allowed).
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(bad("not a binary PPM/PGM")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let n = width * height * channels;
    let raw = bytes
        .get(pos..pos + n)
        .ok_or_else(|| bad("truncated pixel data"))?;
    Image::new(
        height,
        width,
        channels,
        raw.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    check_channels(img)?;
    let color = if img.channels() == 3 {
        image::ColorType::Rgb8
    } else {
        image::ColorType::L8
    };
    image::save_buffer(
        path,
        &to_bytes(img),
        img.width() as u32,
        img.height() as u32,
        color,
    )?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let dynamic = image::open(path)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let (channels, raw) = match dynamic.color().channel_count() {
        1 | 2 => (1, dynamic.into_luma8().into_raw()),
        _ => (3, dynamic.into_rgb8().into_raw()),
    };
    Image::new(
        h,
        w,
        channels,
        raw.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Dispatches on the extension (`.png`, otherwise netpbm).
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(img, path),
        _ => write_ppm(img, path),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        _ => read_ppm(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = Image> {
        (
            1usize..6,
            1usize..6,
            prop_oneof![Just(1usize), Just(3usize)],
        )
            .prop_flat_map(|(h, w, c)| {
                proptest::collection::vec(0.0f64..=1.0, h * w * c)
                    .prop_map(move |d| Image::new(h, w, c, d).unwrap())
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn export_round_trip_within_quantization(img in arb_image()) {
            let dir = tempfile::tempdir().unwrap();
            for name in ["a.ppm", "a.png"] {
                let path = dir.path().join(name);
                write_image(&img, &path).unwrap();
                let back = read_image(&path).unwrap();
                prop_assert_eq!(back.shape(), img.shape());
                prop_assert!(img.linf_distance(&back) <= 0.5 / 255.0 + 1e-12);
                // Quantized images survive a second trip unchanged.
                write_image(&back, &path).unwrap();
                prop_assert_eq!(read_image(&path).unwrap(), back);
            }
        }
    }

    #[test]
    fn malformed_ppm_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\n\x00\x01").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::write(&path, b"P3\n1 1\n255\n0 0 0").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::write(&path, b"P6").unwrap();
        assert!(read_ppm(&path).is_err());
    }
}
