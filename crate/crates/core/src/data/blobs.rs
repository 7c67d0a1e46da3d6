use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Image, LabelledExample};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Class-conditioned blobs on a dark background.
///
/// Each class owns a prototype: a Gaussian blob, elongated along a
/// class-specific axis when `anisotropy > 0`, with alternating narrow and
/// wide widths. Classes also carry a faint diagonal stripe texture whose
/// phase encodes the class. The texture is chromatic and equiluminant
/// (red and green move in opposite directions, weighted so luma is
/// unchanged), and it is anchored to the pixel grid, so sub-pixel shifts,
/// blurring or desaturation erase it while the blob survives.
///
/// Per-image variation: centre jitter with standard deviation
/// `jitter * size` pixels, relative width jitter of `±jitter`, and additive
/// pixel noise with standard deviation `noise`. With `noise = jitter = 0`
/// every image of a class is identical.
///
/// Fields missing from a manifest take their `Default` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub noise: f64,
    pub jitter: f64,
    /// Amplitude of the red channel swing of the class texture.
    pub texture: f64,
    /// Distinct blob colours, cycled over the classes; 0 means one per class.
    pub colors: usize,
    /// Radius of the circle of class centres, as a fraction of the size.
    pub radius: f64,
    /// Elongation of the blob along a class-specific axis; 0 is round.
    pub anisotropy: f64,
    /// Blob contrast against the background.
    pub gain: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 4,
            per_class: 500,
            size: 12,
            channels: 3,
            noise: 0.03,
            jitter: 0.12,
            texture: 0.1,
            colors: 1,
            radius: 0.0,
            anisotropy: 1.0,
            gain: 0.5,
            seed: 0,
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.25, 0.20],
    [0.20, 0.55, 0.95],
    [0.30, 0.90, 0.30],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.90],
    [0.20, 0.90, 0.85],
];

/// Cycles per pixel of the class texture, along the diagonal.
const TEXTURE_FREQUENCY: f64 = 0.4;

struct Prototype {
    cy: f64,
    cx: f64,
    width: f64,
    color: [f64; 3],
    /// Unit vector of the blob axis.
    axis: (f64, f64),
}

fn prototype(class: usize, classes: usize, colors: usize, radius: f64, size: usize) -> Prototype {
    let s = size as f64;
    let angle = std::f64::consts::TAU * class as f64 / classes as f64 + 0.25;
    let radius = radius * s;
    let theta = std::f64::consts::PI * class as f64 / classes as f64;
    let distinct = if colors == 0 { classes } else { colors };
    Prototype {
        cy: (s - 1.0) / 2.0 + radius * angle.sin(),
        cx: (s - 1.0) / 2.0 + radius * angle.cos(),
        width: s * if class % 2 == 0 { 0.10 } else { 0.16 },
        color: PALETTE[(class % distinct) % PALETTE.len()],
        axis: (theta.sin(), theta.cos()),
    }
}

pub fn synth_blobs(cfg: &BlobConfig) -> Result<DatasetSplit> {
    if cfg.size < 8 {
        return Err(Error::InvalidParam(format!(
            "blob images must be at least 8 pixels wide, got {}",
            cfg.size
        )));
    }
    if cfg.classes < 2 || cfg.per_class == 0 {
        return Err(Error::InvalidParam(
            "blobs need at least two classes and one example per class".into(),
        ));
    }
    for (name, v) in [
        ("noise", cfg.noise),
        ("jitter", cfg.jitter),
        ("texture", cfg.texture),
        ("radius", cfg.radius),
        ("anisotropy", cfg.anisotropy),
        ("gain", cfg.gain),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParam(format!("{name} {v} must be >= 0")));
        }
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::InvalidParam("blobs support 1 or 3 channels".into()));
    }
    let n = cfg.size;
    let gauss = Normal::new(0.0, 1.0).unwrap();
    // Green swing that cancels the red swing in luma.
    let green_ratio = 0.299 / 0.587;
    let mut examples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for i in 0..cfg.per_class {
        for class in 0..cfg.classes {
            let proto = prototype(class, cfg.classes, cfg.colors, cfg.radius, n);
            let mut rng = rng_for(&[stream::BLOBS, cfg.seed, class as u64, i as u64]);
            let jitter = cfg.jitter * n as f64;
            let cy = proto.cy + jitter * gauss.sample(&mut rng);
            let cx = proto.cx + jitter * gauss.sample(&mut rng);
            let width = proto.width * (1.0 + cfg.jitter * rng.gen_range(-1.0..1.0));
            let mut data = Vec::with_capacity(n * n * cfg.channels);
            for y in 0..n {
                for x in 0..n {
                    // Coordinates along and across the class axis.
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let along = dy * proto.axis.0 + dx * proto.axis.1;
                    let across = dx * proto.axis.0 - dy * proto.axis.1;
                    let stretch = 1.0 + cfg.anisotropy;
                    let d2 = (along * stretch).powi(2) + (across / stretch).powi(2);
                    let bump = (-d2 / (2.0 * width * width)).exp();
                    let phase = std::f64::consts::TAU
                        * (TEXTURE_FREQUENCY
                            * (y as f64 + x as f64)
                            * std::f64::consts::FRAC_1_SQRT_2
                            + class as f64 / cfg.classes as f64);
                    let swing = cfg.texture * phase.cos();
                    for c in 0..cfg.channels {
                        let (color, tex) = if cfg.channels == 1 {
                            (0.9, 0.0)
                        } else {
                            (proto.color[c], [swing, -green_ratio * swing, 0.0][c])
                        };
                        let v = 0.1
                            + cfg.gain * (color - 0.1) * bump
                            + tex
                            + cfg.noise * gauss.sample(&mut rng);
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            examples.push(LabelledExample {
                image: Image::new(n, n, cfg.channels, data)?,
                label: class,
            });
        }
    }
    DatasetSplit::new(format!("blobs{}", cfg.classes), examples, cfg.classes)
}
