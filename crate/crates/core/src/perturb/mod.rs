//! Natural perturbations: elastic warp, occlusion, Gaussian noise, wave,
//! desaturation and Gaussian blur. Each is driven by one scalar intensity in
//! `[0, 1]` through [`IntensityMap`] plus per-image randomness that is keyed
//! by `(seed, kind, image index)` and therefore replayable.

mod blur;
mod elastic;
mod noise;
mod occlusion;
mod saturation;
mod wave;

pub use blur::{gaussian_blur, gaussian_kernel};
pub use elastic::{elastic, elastic_field, warp_bilinear, DisplacementField};
pub use noise::gaussian_noise;
pub use occlusion::{draw_occluder_center, occlude};
pub use saturation::{luminance, saturate};
pub use wave::{wave, wave_offset};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Elastic,
    Occlusion,
    GaussianNoise,
    Wave,
    Saturation,
    GaussianBlur,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::Elastic,
        PerturbationKind::Occlusion,
        PerturbationKind::GaussianNoise,
        PerturbationKind::Wave,
        PerturbationKind::Saturation,
        PerturbationKind::GaussianBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Elastic => "elastic",
            PerturbationKind::Occlusion => "occlusion",
            PerturbationKind::GaussianNoise => "noise",
            PerturbationKind::Wave => "wave",
            PerturbationKind::Saturation => "saturation",
            PerturbationKind::GaussianBlur => "blur",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "elastic" | "e" => PerturbationKind::Elastic,
            "occlusion" | "o" => PerturbationKind::Occlusion,
            "noise" | "gaussian_noise" | "n" => PerturbationKind::GaussianNoise,
            "wave" | "w" => PerturbationKind::Wave,
            "saturation" | "s" => PerturbationKind::Saturation,
            "blur" | "gaussian_blur" | "b" => PerturbationKind::GaussianBlur,
            _ => {
                return Err(Error::InvalidParam(format!(
                    "unknown perturbation kind {s:?}"
                )))
            }
        })
    }
}

/// Endpoint constants of the intensity maps. Every map is linear in the
/// intensity and yields the identity at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityMap {
    pub elastic_alpha_max: f64,
    pub elastic_sigma: f64,
    pub occlusion_radius_frac_max: f64,
    pub noise_sigma_max: f64,
    pub wave_amplitude_max: f64,
    pub wave_frequency: f64,
    pub blur_sigma_max: f64,
}

impl Default for IntensityMap {
    fn default() -> Self {
        IntensityMap {
            elastic_alpha_max: 8.0,
            elastic_sigma: 4.0,
            occlusion_radius_frac_max: 0.35,
            noise_sigma_max: 0.25,
            wave_amplitude_max: 6.0,
            wave_frequency: 2.0,
            blur_sigma_max: 3.0,
        }
    }
}

/// Kind-specific operator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PerturbParams {
    /// Displacement scale `alpha` in pixels and smoothing width `sigma`.
    Elastic {
        alpha: f64,
        sigma: f64,
    },
    /// Disk radius as a fraction of `min(H, W)`. `thickness` is carried for
    /// the record only; the occluder is always a filled disk.
    Occlusion {
        radius_frac: f64,
        thickness_frac: f64,
    },
    GaussianNoise {
        sigma: f64,
    },
    /// Row shift amplitude in pixels and cycles over the image height.
    Wave {
        amplitude: f64,
        frequency: f64,
    },
    /// Weight of the original colours; `1` is the identity.
    Saturation {
        mix: f64,
    },
    GaussianBlur {
        sigma: f64,
    },
}

pub fn intensity_to_params(
    kind: PerturbationKind,
    intensity: f64,
    map: &IntensityMap,
) -> Result<PerturbParams> {
    check_intensity(intensity)?;
    let s = intensity;
    Ok(match kind {
        PerturbationKind::Elastic => PerturbParams::Elastic {
            alpha: map.elastic_alpha_max * s,
            sigma: map.elastic_sigma,
        },
        PerturbationKind::Occlusion => PerturbParams::Occlusion {
            radius_frac: map.occlusion_radius_frac_max * s,
            thickness_frac: map.occlusion_radius_frac_max * s,
        },
        PerturbationKind::GaussianNoise => PerturbParams::GaussianNoise {
            sigma: map.noise_sigma_max * s,
        },
        PerturbationKind::Wave => PerturbParams::Wave {
            amplitude: map.wave_amplitude_max * s,
            frequency: map.wave_frequency,
        },
        PerturbationKind::Saturation => PerturbParams::Saturation { mix: 1.0 - s },
        PerturbationKind::GaussianBlur => PerturbParams::GaussianBlur {
            sigma: map.blur_sigma_max * s,
        },
    })
}

fn check_intensity(intensity: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::InvalidParam(format!(
            "intensity {intensity} outside [0, 1]"
        )));
    }
    Ok(())
}

/// A fully resolved perturbation: kind, scalar intensity, stream seed and the
/// derived operator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub intensity: f64,
    pub seed: u64,
    pub params: PerturbParams,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, intensity: f64, seed: u64) -> Result<Self> {
        Self::with_map(kind, intensity, seed, &IntensityMap::default())
    }

    pub fn with_map(
        kind: PerturbationKind,
        intensity: f64,
        seed: u64,
        map: &IntensityMap,
    ) -> Result<Self> {
        Ok(PerturbationSpec {
            kind,
            intensity,
            seed,
            params: intensity_to_params(kind, intensity, map)?,
        })
    }

    /// Same operator, different randomness stream.
    pub fn reseeded(&self, seed: u64) -> Self {
        PerturbationSpec {
            seed,
            ..self.clone()
        }
    }

    /// The random stream for one image.
    pub fn draw_rng(&self, image_index: u64) -> ChaCha8Rng {
        rng_for(&[stream::PERTURB, self.seed, self.kind.code(), image_index])
    }
}

/// Applies `spec` to one image. The output depends only on
/// `(image, spec, image_index)` and never on a label.
pub fn perturb(image: &Image, spec: &PerturbationSpec, image_index: u64) -> Result<Image> {
    check_intensity(spec.intensity)?;
    if !image.in_unit_range() {
        return Err(Error::InvalidParam(
            "image intensities outside [0, 1]".into(),
        ));
    }
    if spec.intensity == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = spec.draw_rng(image_index);
    let out = match spec.params {
        PerturbParams::Elastic { alpha, sigma } => elastic(image, alpha, sigma, &mut rng)?,
        PerturbParams::Occlusion { radius_frac, .. } => {
            let radius = radius_frac * image.height().min(image.width()) as f64;
            let center = draw_occluder_center(image.height(), image.width(), radius, &mut rng)?;
            occlude(image, radius, center)
        }
        PerturbParams::GaussianNoise { sigma } => gaussian_noise(image, sigma, &mut rng)?,
        PerturbParams::Wave {
            amplitude,
            frequency,
        } => {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            wave(image, amplitude, frequency, phase)?
        }
        PerturbParams::Saturation { mix } => saturate(image, mix)?,
        PerturbParams::GaussianBlur { sigma } => gaussian_blur(image, sigma)?,
    };
    Ok(out)
}

/// Perturbs a list of images, keying each draw by the matching entry of `indices`.
pub fn perturb_all(
    images: &[Image],
    spec: &PerturbationSpec,
    indices: &[usize],
) -> Result<Vec<Image>> {
    images
        .iter()
        .zip(indices)
        .map(|(img, &i)| perturb(img, spec, i as u64))
        .collect()
}
