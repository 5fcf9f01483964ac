//! Photometric domain-shift transforms applied to images only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::rds::StereoSample;
use crate::error::{Error, Result};
use crate::grid::Image;

pub const GAMMA_RANGE: (f64, f64) = (0.25, 4.0);
pub const CONTRAST_RANGE: (f64, f64) = (0.25, 4.0);
pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.5, 0.5);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.2);
pub const HUE_RANGE: (f64, f64) = (-std::f64::consts::PI, std::f64::consts::PI);

/// Per-view photometric transform. Identity values: gamma 1, brightness 0,
/// contrast 1, noise 0, hue 0, symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainStyle {
    pub gamma: f64,
    pub brightness_offset: f64,
    pub contrast_scale: f64,
    pub noise_sigma: f64,
    /// Rotation about the gray axis, radians.
    pub hue_rotation: f64,
    /// Draw independent jittered parameters for each view.
    pub asymmetric: bool,
    pub jitter: AsymmetricJitter,
}

/// Half-widths of the per-view draws used when `asymmetric` is set.
/// Gamma and contrast jitter multiplicatively (log-uniform).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsymmetricJitter {
    pub log_gamma: f64,
    pub brightness: f64,
    pub log_contrast: f64,
    pub hue: f64,
}

impl Default for AsymmetricJitter {
    fn default() -> Self {
        Self {
            log_gamma: 0.2,
            brightness: 0.1,
            log_contrast: 0.2,
            hue: 0.1,
        }
    }
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainStyle {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            brightness_offset: 0.0,
            contrast_scale: 1.0,
            noise_sigma: 0.0,
            hue_rotation: 0.0,
            asymmetric: false,
            jitter: AsymmetricJitter::default(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0
            && self.brightness_offset == 0.0
            && self.contrast_scale == 1.0
            && self.noise_sigma == 0.0
            && self.hue_rotation == 0.0
            && !self.asymmetric
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, value: f64, (min, max): (f64, f64)| {
            if value.is_finite() && value >= min && value <= max {
                Ok(())
            } else {
                Err(Error::StyleOutOfRange {
                    name,
                    value,
                    min,
                    max,
                })
            }
        };
        check("gamma", self.gamma, GAMMA_RANGE)?;
        check("contrast_scale", self.contrast_scale, CONTRAST_RANGE)?;
        check("brightness_offset", self.brightness_offset, BRIGHTNESS_RANGE)?;
        check("noise_sigma", self.noise_sigma, NOISE_RANGE)?;
        check("hue_rotation", self.hue_rotation, HUE_RANGE)?;
        check("jitter.log_gamma", self.jitter.log_gamma, (0.0, 1.0))?;
        check("jitter.brightness", self.jitter.brightness, (0.0, 0.5))?;
        check("jitter.log_contrast", self.jitter.log_contrast, (0.0, 1.0))?;
        check("jitter.hue", self.jitter.hue, (0.0, std::f64::consts::PI))?;
        Ok(())
    }

    /// Compact label such as `g2.00_b0.00_c1.00_n0.00_h0.00_sym`.
    pub fn tag(&self) -> String {
        if self.is_identity() {
            return "identity".into();
        }
        format!(
            "g{:.2}_b{:.2}_c{:.2}_n{:.2}_h{:.2}_{}",
            self.gamma,
            self.brightness_offset,
            self.contrast_scale,
            self.noise_sigma,
            self.hue_rotation,
            if self.asymmetric { "asym" } else { "sym" }
        )
    }

    fn jittered(&self, rng: &mut impl Rng) -> ViewTransform {
        let j = &self.jitter;
        let sym = |rng: &mut dyn rand::RngCore, half: f64| {
            if half > 0.0 {
                rng.random_range(-half..=half)
            } else {
                0.0
            }
        };
        ViewTransform {
            gamma: (self.gamma * sym(rng, j.log_gamma).exp()).clamp(GAMMA_RANGE.0, GAMMA_RANGE.1),
            brightness: self.brightness_offset + sym(rng, j.brightness),
            contrast: (self.contrast_scale * sym(rng, j.log_contrast).exp())
                .clamp(CONTRAST_RANGE.0, CONTRAST_RANGE.1),
            hue: self.hue_rotation + sym(rng, j.hue),
            noise_sigma: self.noise_sigma,
        }
    }

    fn exact(&self) -> ViewTransform {
        ViewTransform {
            gamma: self.gamma,
            brightness: self.brightness_offset,
            contrast: self.contrast_scale,
            hue: self.hue_rotation,
            noise_sigma: self.noise_sigma,
        }
    }
}

struct ViewTransform {
    gamma: f64,
    brightness: f64,
    contrast: f64,
    hue: f64,
    noise_sigma: f64,
}

impl ViewTransform {
    fn apply(&self, image: &Image, rng: &mut impl Rng) -> Image {
        let mut out = image.clone();
        let (w, h) = image.dims();
        let hue = (self.hue != 0.0).then(|| hue_matrix(self.hue));
        let noise = (self.noise_sigma > 0.0).then(|| Normal::new(0.0, self.noise_sigma).unwrap());
        for v in 0..h {
            for u in 0..w {
                let mut px = image.pixel(u, v);
                if let Some(m) = &hue {
                    px = [
                        m[0][0] * px[0] + m[0][1] * px[1] + m[0][2] * px[2],
                        m[1][0] * px[0] + m[1][1] * px[1] + m[1][2] * px[2],
                        m[2][0] * px[0] + m[2][1] * px[1] + m[2][2] * px[2],
                    ];
                }
                for x in &mut px {
                    if self.contrast != 1.0 {
                        *x = (*x - 0.5) * self.contrast + 0.5;
                    }
                    if self.brightness != 0.0 {
                        *x += self.brightness;
                    }
                    if self.gamma != 1.0 {
                        *x = x.clamp(0.0, 1.0).powf(self.gamma);
                    }
                    if let Some(n) = &noise {
                        *x += n.sample(rng);
                    }
                }
                if hue.is_some() || self.contrast != 1.0 || self.brightness != 0.0 || noise.is_some() {
                    for x in &mut px {
                        *x = x.clamp(0.0, 1.0);
                    }
                }
                out.set_pixel(u, v, px);
            }
        }
        out
    }
}

/// Rotation by `angle` about the `(1, 1, 1)` gray axis of RGB space.
fn hue_matrix(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let a = c + (1.0 - c) / 3.0;
    let k = (1.0 / 3.0f64).sqrt();
    let b = (1.0 - c) / 3.0 - k * s;
    let d = (1.0 - c) / 3.0 + k * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Applies `style` to both images. Disparities and occlusion are copied unchanged.
pub fn apply_style(sample: &StereoSample, style: &DomainStyle, seed: u64) -> Result<StereoSample> {
    style.validate()?;
    if style.is_identity() {
        return Ok(sample.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (left_t, right_t) = if style.asymmetric {
        let l = style.jittered(&mut rng);
        let r = style.jittered(&mut rng);
        (l, r)
    } else {
        (style.exact(), style.exact())
    };
    let mut out = sample.clone();
    out.left = left_t.apply(&sample.left, &mut rng);
    out.right = right_t.apply(&sample.right, &mut rng);
    out.style_tag = style.tag();
    Ok(out)
}
