//! Gaussian image pyramids and canonical coordinate grids.
//!
//! Level 1 is the original image; level `t + 1` is level `t` blurred with the
//! 5-tap binomial kernel and decimated by two (extents round up).

use crate::error::{contract, Error, Result};
use crate::image_io::{Image2D, MIN_EXTENT};
use crate::tensor::{blur, Tensor};

const BINOMIAL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Clone, Debug)]
pub struct ImagePyramid {
    /// `levels[0]` is the finest (original) image.
    levels: Vec<Image2D>,
}

impl ImagePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Level `t` in 1-based pyramid numbering (1 = finest).
    pub fn level(&self, t: usize) -> &Image2D {
        &self.levels[t - 1]
    }

    pub fn levels(&self) -> &[Image2D] {
        &self.levels
    }
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Largest number of levels whose coarsest image keeps at least
/// [`MIN_EXTENT`] pixels per side.
pub fn max_levels(height: usize, width: usize) -> usize {
    let (mut h, mut w, mut k) = (height, width, 0);
    while h >= MIN_EXTENT && w >= MIN_EXTENT {
        k += 1;
        h = half(h);
        w = half(w);
    }
    k
}

/// Extents `(height, width)` of every level, finest first.
pub fn level_extents(height: usize, width: usize, levels: usize) -> Vec<(usize, usize)> {
    std::iter::successors(Some((height, width)), |&(h, w)| Some((half(h), half(w))))
        .take(levels)
        .collect()
}

fn downsample(image: &Image2D) -> Result<Image2D> {
    let (h, w) = (image.height(), image.width());
    let blurred = blur::blur(image.pixels(), 1, h, w, &BINOMIAL);
    let (nh, nw) = (half(h), half(w));
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            out.push(blurred[2 * y * w + 2 * x].clamp(0.0, 1.0));
        }
    }
    Image2D::new(nw, nh, out)
}

pub fn gaussian_pyramid(image: &Image2D, levels: usize) -> Result<ImagePyramid> {
    let feasible = max_levels(image.height(), image.width());
    if levels == 0 || levels > feasible {
        return Err(Error::Config(format!(
            "{levels} pyramid levels requested for a {}x{} image; the maximum feasible is {feasible}",
            image.width(),
            image.height()
        )));
    }
    let mut out = vec![image.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap())?;
        out.push(next);
    }
    Ok(ImagePyramid { levels: out })
}

/// Normalized pixel-center coordinates as a `[1, 2, H, W]` tensor (channel
/// 0 = x, channel 1 = y): `x_j = -1 + 2j/(W-1)`, `y_i = -1 + 2i/(H-1)`.
pub fn coord_grid(height: usize, width: usize) -> Result<Tensor> {
    if height < 2 || width < 2 {
        return Err(contract("coord_grid", format!("extents {height}x{width} must be at least 2x2")));
    }
    // (2j - (n-1)) / (n-1) is exactly antisymmetric under j -> n-1-j
    let axis = |j: usize, n: usize| ((2 * j) as f64 - (n - 1) as f64) / (n - 1) as f64;
    let xs: Vec<f32> = (0..width).map(|j| axis(j, width) as f32).collect();
    let ys: Vec<f32> = (0..height).map(|i| axis(i, height) as f32).collect();
    let mut data = Vec::with_capacity(2 * height * width);
    for _ in 0..height {
        data.extend_from_slice(&xs);
    }
    for &y in &ys {
        data.extend(std::iter::repeat_n(y, width));
    }
    Tensor::new(&[1, 2, height, width], data)
}
