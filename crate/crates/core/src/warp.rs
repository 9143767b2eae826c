//! Deformation-field algebra.
//!
//! Deformations are absolute coordinate maps `φ: grid → [-1, 1]²` stored as
//! `[1, 2, H, W]` tensors (x channel first); the identity deformation is the
//! coordinate grid itself. Velocity fields share the layout but hold
//! displacements. Every operation exists in a differentiable form on a
//! [`Tape`] and, where useful, as a plain value function.

use crate::error::{contract, Result};
use crate::image_io::{Image2D, Mask2D};
use crate::pyramid::coord_grid;
use crate::tensor::{blur, sample, Tape, Tensor, Var};

/// Upper bound on the number of squarings in [`exp_velocity`].
pub const MAX_SQUARINGS: u32 = 10;

fn field_extents(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (c, h, w) = t.chw(op)?;
    if c != 2 {
        return Err(contract(op, format!("a field needs 2 channels, got {c}")));
    }
    if h < 2 || w < 2 {
        return Err(contract(op, format!("field extents {h}x{w} must be at least 2x2")));
    }
    Ok((h, w))
}

/// Absolute target coordinates per pixel, normalized to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField(Tensor);

impl DeformationField {
    pub fn identity(height: usize, width: usize) -> Self {
        Self(coord_grid(height, width).expect("extents at least 2x2"))
    }

    /// Identity shifted by `(dx, dy)` in normalized units.
    pub fn translation(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let mut t = coord_grid(height, width).expect("extents at least 2x2");
        let n = height * width;
        let data = t.data_mut();
        data[..n].iter_mut().for_each(|v| *v += dx);
        data[n..].iter_mut().for_each(|v| *v += dy);
        Self(t)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        field_extents(&t, "deformation field")?;
        t.check_finite("deformation field")?;
        Ok(Self(t))
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `φ(x) − x` converted to pixel units, `[2, H, W]` layout.
    pub fn displacement_px(&self) -> Vec<f32> {
        let (h, w) = (self.height(), self.width());
        let grid = coord_grid(h, w).expect("valid extents");
        let n = h * w;
        let (sx, sy) = (0.5 * (w - 1) as f32, 0.5 * (h - 1) as f32);
        self.0
            .data()
            .iter()
            .zip(grid.data())
            .enumerate()
            .map(|(i, (p, g))| (p - g) * if i < n { sx } else { sy })
            .collect()
    }

    /// Per-pixel displacement magnitude in pixels.
    pub fn displacement_norms_px(&self) -> Vec<f32> {
        let d = self.displacement_px();
        let n = self.width() * self.height();
        (0..n).map(|p| d[p].hypot(d[n + p])).collect()
    }

    pub fn mean_displacement_px(&self) -> f64 {
        let norms = self.displacement_norms_px();
        norms.iter().map(|&v| v as f64).sum::<f64>() / norms.len() as f64
    }
}

/// Stationary velocity in normalized units per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField(Tensor);

impl VelocityField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[1, 2, height, width]))
    }

    /// Constant velocity `(vx, vy)` in normalized units.
    pub fn constant(height: usize, width: usize, vx: f32, vy: f32) -> Self {
        let n = height * width;
        Self(Tensor::from_fn(&[1, 2, height, width], |i| if i < n { vx } else { vy }))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        field_extents(&t, "velocity field")?;
        t.check_finite("velocity field")?;
        Ok(Self(t))
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn negated(&self) -> Self {
        Self(Tensor::from_fn(self.0.shape(), |i| -self.0.data()[i]))
    }

    /// Largest per-pixel ∞-norm, each component converted to pixels along
    /// its own axis.
    pub fn max_norm_px(&self) -> f32 {
        let (h, w) = (self.height(), self.width());
        let n = h * w;
        let d = self.0.data();
        let (sx, sy) = (0.5 * (w - 1) as f32, 0.5 * (h - 1) as f32);
        (0..n).map(|p| (d[p] * sx).abs().max((d[n + p] * sy).abs())).fold(0.0, f32::max)
    }
}

fn max_inf_norm(v: &Tensor) -> f32 {
    let n = v.len() / 2;
    let (x, y) = v.data().split_at(n);
    x.iter()
        .zip(y)
        .map(|(a, b)| a.abs().max(b.abs()))
        .fold(0.0, f32::max)
}

/// Number of squarings that brings every scaled step below half a pixel,
/// where one pixel is `2 / max(H, W)` in normalized units.
pub fn squaring_steps(v: &Tensor, height: usize, width: usize) -> u32 {
    let pixel = 2.0 / height.max(width) as f64;
    let ratio = (max_inf_norm(v) as f64 / (0.5 * pixel)).max(1.0);
    (ratio.log2().ceil() as i64).clamp(0, MAX_SQUARINGS as i64) as u32
}

/// `outer ∘ inner`, evaluated as `inner + (outer − x)(inner)`.
///
/// Inside the image this equals sampling `outer` at `inner`. Beyond the
/// border the displacement of `outer` (not its absolute position) is held
/// constant, so flows leaving the image stay invertible instead of
/// collapsing onto the edge.
pub fn compose(tape: &mut Tape, outer: Var, inner: Var) -> Result<Var> {
    let eo = field_extents(tape.value(outer), "compose")?;
    let ei = field_extents(tape.value(inner), "compose")?;
    if eo != ei {
        return Err(contract("compose", format!("extent mismatch {eo:?} vs {ei:?}")));
    }
    let grid = tape.constant(coord_grid(eo.0, eo.1)?);
    compose_on(tape, outer, inner, grid)
}

fn compose_on(tape: &mut Tape, outer: Var, inner: Var, grid: Var) -> Result<Var> {
    let disp = tape.sub(outer, grid)?;
    let moved = tape.bilinear_sample(disp, inner)?;
    tape.add(inner, moved)
}

/// Scaling and squaring: `φ₀ = x + v / 2^N`, then `φ ← φ ∘ φ` N times.
pub fn exp_velocity(tape: &mut Tape, v: Var) -> Result<Var> {
    let (h, w) = field_extents(tape.value(v), "exp_velocity")?;
    tape.value(v).check_finite("exp_velocity")?;
    let n = squaring_steps(tape.value(v), h, w);
    let grid = tape.constant(coord_grid(h, w)?);
    let step = if n == 0 {
        v
    } else {
        tape.scale(v, 1.0 / (1u32 << n) as f32)?
    };
    let mut phi = tape.add(grid, step)?;
    for _ in 0..n {
        phi = compose_on(tape, phi, phi, grid)?;
    }
    Ok(phi)
}

/// Resamples a coarse deformation onto the finer canonical grid. Values
/// are normalized coordinates at every level, so no rescaling is needed.
pub fn upsample_deformation(tape: &mut Tape, d: Var, new_height: usize, new_width: usize) -> Result<Var> {
    let (h, w) = field_extents(tape.value(d), "upsample_deformation")?;
    if new_height < h || new_width < w {
        return Err(contract(
            "upsample_deformation",
            format!("cannot downsample {h}x{w} to {new_height}x{new_width}"),
        ));
    }
    if (new_height, new_width) == (h, w) {
        return Ok(d);
    }
    let grid = tape.constant(coord_grid(new_height, new_width)?);
    tape.bilinear_sample(d, grid)
}

/// Separable Gaussian low-pass per channel (radius `ceil(3σ)`, reflected
/// borders). `sigma == 0` is the identity.
pub fn smooth_velocity(tape: &mut Tape, v: Var, sigma: f32) -> Result<Var> {
    if !(sigma >= 0.0) {
        return Err(contract("smooth_velocity", format!("sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(v);
    }
    tape.blur(v, blur::gaussian_kernel_3sigma(sigma))
}

/// Samples `image` at `φ(x)`.
pub fn warp_image(tape: &mut Tape, image: Var, d: Var) -> Result<Var> {
    let (_, ih, iw) = tape.value(image).chw("warp_image")?;
    let (dh, dw) = field_extents(tape.value(d), "warp_image")?;
    if (ih, iw) != (dh, dw) {
        return Err(contract("warp_image", format!("image {ih}x{iw} vs field {dh}x{dw}")));
    }
    tape.bilinear_sample(image, d)
}

/// Runs a tape-level operation on constants and returns its value.
fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok(tape.value(out).clone())
}

pub fn exp_velocity_field(v: &VelocityField) -> Result<DeformationField> {
    let t = eval(|tape| {
        let v = tape.constant(v.tensor().clone());
        exp_velocity(tape, v)
    })?;
    DeformationField::from_tensor(t)
}

pub fn compose_fields(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    let t = eval(|tape| {
        let o = tape.constant(outer.tensor().clone());
        let i = tape.constant(inner.tensor().clone());
        compose(tape, o, i)
    })?;
    DeformationField::from_tensor(t)
}

pub fn upsample_field(d: &DeformationField, new_height: usize, new_width: usize) -> Result<DeformationField> {
    let t = eval(|tape| {
        let d = tape.constant(d.tensor().clone());
        upsample_deformation(tape, d, new_height, new_width)
    })?;
    DeformationField::from_tensor(t)
}

pub fn smooth_field(v: &VelocityField, sigma: f32) -> Result<VelocityField> {
    let t = eval(|tape| {
        let v = tape.constant(v.tensor().clone());
        smooth_velocity(tape, v, sigma)
    })?;
    VelocityField::from_tensor(t)
}

/// Bilinear warp of an image by a deformation of the same extents.
pub fn warp_image_value(image: &Image2D, d: &DeformationField) -> Result<Image2D> {
    let t = eval(|tape| {
        let i = tape.constant(image.to_tensor());
        let d = tape.constant(d.tensor().clone());
        warp_image(tape, i, d)
    })?;
    Image2D::from_tensor(&t)
}

/// Nearest-neighbor warp of a label mask (labels must not be blended).
pub fn warp_mask_nearest(mask: &Mask2D, d: &DeformationField) -> Result<Mask2D> {
    let (h, w) = (d.height(), d.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(contract(
            "warp_mask",
            format!("mask {}x{} vs field {h}x{w}", mask.height(), mask.width()),
        ));
    }
    let labels = sample::nearest_labels(mask.labels(), h, w, d.tensor().data(), h, w);
    Mask2D::new(w, h, labels)
}

/// Per-pixel `det(∂φ/∂x)` in pixel units, `[H, W]` row-major.
///
/// Computed as `det(I + ∇u)` with `u = φ − x`, central differences inside
/// and one-sided differences on the border, so the identity gives exactly 1.
pub fn jacobian_det(d: &DeformationField) -> Result<Vec<f64>> {
    let (h, w) = (d.height(), d.width());
    if h < 3 || w < 3 {
        return Err(contract("jacobian_det", format!("extents {h}x{w} must be at least 3x3")));
    }
    let u = d.displacement_px();
    let n = h * w;
    let (ux, uy) = u.split_at(n);
    let at = |f: &[f32], x: usize, y: usize| f[y * w + x] as f64;
    let dx = |f: &[f32], x: usize, y: usize| -> f64 {
        if x == 0 {
            at(f, 1, y) - at(f, 0, y)
        } else if x == w - 1 {
            at(f, w - 1, y) - at(f, w - 2, y)
        } else {
            0.5 * (at(f, x + 1, y) - at(f, x - 1, y))
        }
    };
    let dy = |f: &[f32], x: usize, y: usize| -> f64 {
        if y == 0 {
            at(f, x, 1) - at(f, x, 0)
        } else if y == h - 1 {
            at(f, x, h - 1) - at(f, x, h - 2)
        } else {
            0.5 * (at(f, x, y + 1) - at(f, x, y - 1))
        }
    };
    let mut out = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let j00 = 1.0 + dx(ux, x, y);
            let j01 = dy(ux, x, y);
            let j10 = dx(uy, x, y);
            let j11 = 1.0 + dy(uy, x, y);
            out.push(j00 * j11 - j01 * j10);
        }
    }
    Ok(out)
}
