//! Bilinear sampling on the align-corners convention: normalized coordinate
//! -1 is the center of the first pixel, +1 the center of the last one.
//! Coordinates outside [-1, 1] clamp to the border (zero coordinate gradient).

/// Interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    i0: usize,
    i1: usize,
    frac: f32,
    /// d(pixel position) / d(normalized coordinate); zero when clamped.
    dpos: f32,
}

#[inline]
fn stencil(coord: f32, n: usize) -> Stencil {
    if n == 1 {
        return Stencil { i0: 0, i1: 0, frac: 0.0, dpos: 0.0 };
    }
    let scale = 0.5 * (n - 1) as f32;
    let last = (n - 1) as f32;
    let pos = (coord + 1.0) * scale;
    let dpos = if (-1.0..=1.0).contains(&coord) { scale } else { 0.0 };
    let mut pos = pos.clamp(0.0, last);
    // grid coordinates are rounded to f32; land them exactly on pixel centers
    let nearest = pos.round();
    if (pos - nearest).abs() <= 4.0 * f32::EPSILON * last {
        pos = nearest;
    }
    let i0 = (pos.floor() as usize).min(n - 2);
    Stencil {
        i0,
        i1: i0 + 1,
        frac: pos - i0 as f32,
        dpos,
    }
}

/// Samples `image` (`[c, h, w]`) at `coords` (`[2, ho, wo]`, x then y).
pub fn bilinear_forward(image: &[f32], c: usize, h: usize, w: usize, coords: &[f32], ho: usize, wo: usize) -> Vec<f32> {
    let n_out = ho * wo;
    let (cx, cy) = coords.split_at(n_out);
    let mut out = vec![0.0f32; c * n_out];
    for p in 0..n_out {
        let sx = stencil(cx[p], w);
        let sy = stencil(cy[p], h);
        let (w00, w01) = ((1.0 - sy.frac) * (1.0 - sx.frac), (1.0 - sy.frac) * sx.frac);
        let (w10, w11) = (sy.frac * (1.0 - sx.frac), sy.frac * sx.frac);
        for ch in 0..c {
            let plane = &image[ch * h * w..(ch + 1) * h * w];
            let r0 = sy.i0 * w;
            let r1 = sy.i1 * w;
            out[ch * n_out + p] = w00 * plane[r0 + sx.i0]
                + w01 * plane[r0 + sx.i1]
                + w10 * plane[r1 + sx.i0]
                + w11 * plane[r1 + sx.i1];
        }
    }
    out
}

/// Gradients of [`bilinear_forward`] w.r.t. the image and the coordinates.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward(
    grad_out: &[f32],
    image: &[f32],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f32],
    ho: usize,
    wo: usize,
    need_image: bool,
    need_coords: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let n_out = ho * wo;
    let (cx, cy) = coords.split_at(n_out);
    let mut g_img = need_image.then(|| vec![0.0f32; c * h * w]);
    let mut g_coords = need_coords.then(|| vec![0.0f32; 2 * n_out]);
    for p in 0..n_out {
        let sx = stencil(cx[p], w);
        let sy = stencil(cy[p], h);
        let (fx, fy) = (sx.frac, sy.frac);
        let r0 = sy.i0 * w;
        let r1 = sy.i1 * w;
        let mut gx = 0.0f32;
        let mut gy = 0.0f32;
        for ch in 0..c {
            let g = grad_out[ch * n_out + p];
            if g == 0.0 {
                continue;
            }
            let off = ch * h * w;
            if let Some(gi) = g_img.as_mut() {
                gi[off + r0 + sx.i0] += g * (1.0 - fy) * (1.0 - fx);
                gi[off + r0 + sx.i1] += g * (1.0 - fy) * fx;
                gi[off + r1 + sx.i0] += g * fy * (1.0 - fx);
                gi[off + r1 + sx.i1] += g * fy * fx;
            }
            if g_coords.is_some() {
                let plane = &image[off..off + h * w];
                let (v00, v01) = (plane[r0 + sx.i0], plane[r0 + sx.i1]);
                let (v10, v11) = (plane[r1 + sx.i0], plane[r1 + sx.i1]);
                gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
        }
        if let Some(gc) = g_coords.as_mut() {
            gc[p] = gx * sx.dpos;
            gc[n_out + p] = gy * sy.dpos;
        }
    }
    (g_img, g_coords)
}

/// Nearest-neighbor lookup of an 8-bit label raster at normalized coordinates.
pub fn nearest_labels(labels: &[u8], h: usize, w: usize, coords: &[f32], ho: usize, wo: usize) -> Vec<u8> {
    let n_out = ho * wo;
    let (cx, cy) = coords.split_at(n_out);
    let index = |coord: f32, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let pos = ((coord + 1.0) * 0.5 * (n - 1) as f32).clamp(0.0, (n - 1) as f32);
        (pos.round() as usize).min(n - 1)
    };
    (0..n_out)
        .map(|p| labels[index(cy[p], h) * w + index(cx[p], w)])
        .collect()
}
