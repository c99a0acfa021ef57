//! Random affine augmentation: rotation, scale, shear and horizontal
//! reflection applied about the image center with nearest-neighbor
//! sampling. Out-of-bounds source reads yield 0.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    /// degrees, sampled from [0, 360)
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    pub shear: (f64, f64),
    pub reflect: bool,
    /// chance that the training loop augments a given sample
    pub prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation: (0.0, 360.0),
            scale: (0.5, 1.0),
            shear: (-0.5, 0.5),
            reflect: true,
            prob: 0.5,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation.0 <= self.rotation.1
            && self.scale.0 <= self.scale.1
            && self.scale.0 > 0.0
            && self.shear.0 <= self.shear.1
            && (0.0..=1.0).contains(&self.prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid augmentation ranges".into()))
        }
    }
}

/// One concrete draw from an AugmentSpec.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        scale: 1.0,
        shear: 0.0,
        flip: false,
    };

    pub fn sample<R: Rng>(spec: &AugmentSpec, rng: &mut R) -> Self {
        let range = |lo: f64, hi: f64, rng: &mut R| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..hi)
            }
        };
        AffineParams {
            rotation_deg: range(spec.rotation.0, spec.rotation.1, rng),
            scale: range(spec.scale.0, spec.scale.1, rng),
            shear: range(spec.shear.0, spec.shear.1, rng),
            flip: spec.reflect && rng.gen_bool(0.5),
        }
    }
}

/// Applies the affine map about the image center. The forward map is
/// rotation * shear * scale * reflection; sampling inverts it per pixel.
pub fn apply_affine(img: &GrayImage, p: &AffineParams) -> GrayImage {
    let theta = p.rotation_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    let fx = if p.flip { -1.0 } else { 1.0 };
    // forward M = R * Sh * Sc * F in (x, y) coordinates,
    // with Sh*Sc*F = [[s*fx, s*shear], [0, s]]
    let a = p.scale * fx;
    let b = p.scale * p.shear;
    let d = p.scale;
    // R * that
    let m = [cos * a, cos * b - sin * d, sin * a, sin * b + cos * d];
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];

    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(img.width * img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let vx = x as f64 - cx;
            let vy = y as f64 - cy;
            let sx = inv[0] * vx + inv[1] * vy + cx;
            let sy = inv[2] * vx + inv[3] * vy + cy;
            let (si, sj) = (sy.round(), sx.round());
            let value = if si >= 0.0 && sj >= 0.0 && (si as usize) < img.height && (sj as usize) < img.width
            {
                img.at(si as usize, sj as usize)
            } else {
                0
            };
            pixels.push(value);
        }
    }
    GrayImage::new(img.width, img.height, pixels).unwrap()
}

/// Samples parameters from the spec and applies them.
pub fn augment<R: Rng>(img: &GrayImage, spec: &AugmentSpec, rng: &mut R) -> Result<GrayImage> {
    spec.validate()?;
    let params = AffineParams::sample(spec, rng);
    Ok(apply_affine(img, &params))
}
