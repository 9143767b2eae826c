//! Synthetic image pairs with known deformations.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image_io::{Image2D, Mask2D};
use crate::tensor::{blur, Tensor};
use crate::warp::{exp_velocity_field, warp_image_value, warp_mask_nearest, DeformationField, VelocityField};

/// Smoothed white noise rescaled so the largest per-pixel ∞-norm is
/// exactly `amplitude_px` pixels.
pub fn random_smooth_velocity(seed: u64, amplitude_px: f32, sigma_px: f32, height: usize, width: usize) -> Result<VelocityField> {
    let limit = 0.25 * height.min(width) as f32;
    if !(amplitude_px >= 0.0 && amplitude_px <= limit) {
        return Err(contract(
            "random_smooth_velocity",
            format!("amplitude {amplitude_px} px outside [0, {limit}] for {width}x{height}"),
        ));
    }
    if !(sigma_px >= 0.0 && sigma_px.is_finite()) {
        return Err(contract("random_smooth_velocity", format!("sigma {sigma_px} must be non-negative")));
    }
    if height < 2 || width < 2 {
        return Err(contract("random_smooth_velocity", format!("extents {height}x{width} too small")));
    }
    let n = height * width;
    if amplitude_px == 0.0 {
        return Ok(VelocityField::zeros(height, width));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0f32, 1.0);
    let noise: Vec<f32> = (0..2 * n).map(|_| dist.sample(&mut rng)).collect();
    let smooth = blur::blur(&noise, 2, height, width, &blur::gaussian_kernel_3sigma(sigma_px));
    let peak = (0..n).map(|p| smooth[p].abs().max(smooth[n + p].abs()) as f64).fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(VelocityField::zeros(height, width));
    }
    let to_norm = [2.0 / (width - 1) as f64, 2.0 / (height - 1) as f64];
    let data = smooth
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 / peak * amplitude_px as f64 * to_norm[i / n]) as f32)
        .collect();
    VelocityField::from_tensor(Tensor::new(&[1, 2, height, width], data)?)
}

pub const LABEL_CAVITY: u8 = 1;
pub const LABEL_WALL: u8 = 2;

/// Blurred cardiac-like phantom: a bright disk (label 1) inside a darker
/// annulus (label 2) on a weakly textured background. The seed jitters the
/// center, radii and texture phase.
pub fn phantom(size: usize, seed: u64) -> Result<(Image2D, Mask2D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let jitter = Uniform::new_inclusive(-1.0f32, 1.0);
    let s = size as f32;
    let cx = 0.5 * (s - 1.0) + 0.04 * s * jitter.sample(&mut rng);
    let cy = 0.5 * (s - 1.0) + 0.04 * s * jitter.sample(&mut rng);
    let inner = s * (0.16 + 0.015 * jitter.sample(&mut rng));
    let outer = s * (0.27 + 0.015 * jitter.sample(&mut rng));
    let phase = [
        std::f32::consts::PI * jitter.sample(&mut rng),
        std::f32::consts::PI * jitter.sample(&mut rng),
    ];
    let mut raw = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32, y as f32);
            let r = (fx - cx).hypot(fy - cy);
            let (value, label) = if r < inner {
                (0.9, LABEL_CAVITY)
            } else if r < outer {
                (0.45, LABEL_WALL)
            } else {
                let k = 2.0 * std::f32::consts::PI / s;
                let texture = (3.0 * k * fx + phase[0]).sin() * (2.0 * k * fy + phase[1]).cos();
                (0.15 + 0.06 * texture, 0)
            };
            raw.push(value);
            labels.push(label);
        }
    }
    let smooth = blur::blur(&raw, 1, size, size, &blur::gaussian_kernel_3sigma(1.0));
    let pixels = smooth.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok((Image2D::new(size, size, pixels)?, Mask2D::new(size, size, labels)?))
}

/// Generator settings of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    pub amplitude_px: f32,
    pub sigma_px: f32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 64,
            amplitude_px: 6.0,
            sigma_px: 8.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub fixed: Image2D,
    pub moving: Image2D,
    pub fixed_mask: Mask2D,
    pub moving_mask: Mask2D,
    pub velocity: VelocityField,
    /// `exp(v)`, the map that produced the moving image:
    /// `moving(x) = fixed(gt(x))`.
    pub gt_field: DeformationField,
    /// `exp(−v)`, the field a registration should find to pull `moving`
    /// back onto `fixed`.
    pub gt_forward: DeformationField,
    pub params: Option<SynthParams>,
}

/// `moving = fixed ∘ exp(v)`, masks warped with nearest neighbors.
pub fn make_synthetic_pair(base: &Image2D, base_mask: &Mask2D, v: &VelocityField) -> Result<SyntheticPair> {
    let (h, w) = (base.height(), base.width());
    if (base_mask.height(), base_mask.width()) != (h, w) || (v.height(), v.width()) != (h, w) {
        return Err(contract("make_synthetic_pair", "image, mask and velocity extents differ"));
    }
    let gt_field = exp_velocity_field(v)?;
    let gt_forward = exp_velocity_field(&v.negated())?;
    Ok(SyntheticPair {
        fixed: base.clone(),
        moving: warp_image_value(base, &gt_field)?,
        fixed_mask: base_mask.clone(),
        moving_mask: warp_mask_nearest(base_mask, &gt_field)?,
        velocity: v.clone(),
        gt_field,
        gt_forward,
        params: None,
    })
}

/// Phantom plus random smooth velocity, both derived from `params.seed`.
pub fn generate_pair(params: &SynthParams) -> Result<SyntheticPair> {
    let (base, mask) = phantom(params.size, params.seed)?;
    let v = random_smooth_velocity(params.seed, params.amplitude_px, params.sigma_px, params.size, params.size)?;
    let mut pair = make_synthetic_pair(&base, &mask, &v)?;
    pair.params = Some(params.clone());
    Ok(pair)
}
