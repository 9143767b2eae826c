//! Separable 1-D kernels applied along both image axes with reflected
//! borders (`d c b a | a b c d | d c b a`).

/// Maps an out-of-range index back into `0..n` by mirror reflection about the
/// pixel edges. Repeats for kernels wider than the image.
#[inline]
pub fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Normalized sampled Gaussian with the given radius.
pub fn gaussian_kernel(sigma: f32, radius: usize) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let raw: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / s2).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel_3sigma(sigma: f32) -> Vec<f32> {
    gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize)
}

fn pass_x(src: &[f32], planes: usize, h: usize, w: usize, kernel: &[f32], adjoint: bool) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0f32; src.len()];
    for pl in 0..planes {
        for y in 0..h {
            let row = pl * h * w + y * w;
            if adjoint {
                let mut acc = vec![0.0f64; w];
                for x in 0..w {
                    let g = src[row + x] as f64;
                    for (k, &kv) in kernel.iter().enumerate() {
                        acc[reflect(x as isize + k as isize - r, w)] += kv as f64 * g;
                    }
                }
                for (o, a) in out[row..row + w].iter_mut().zip(acc) {
                    *o = a as f32;
                }
            } else {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for (k, &kv) in kernel.iter().enumerate() {
                        acc += kv as f64 * src[row + reflect(x as isize + k as isize - r, w)] as f64;
                    }
                    out[row + x] = acc as f32;
                }
            }
        }
    }
    out
}

fn pass_y(src: &[f32], planes: usize, h: usize, w: usize, kernel: &[f32], adjoint: bool) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0f32; src.len()];
    let mut acc = vec![0.0f64; h * w];
    for pl in 0..planes {
        let base = pl * h * w;
        acc.fill(0.0);
        for y in 0..h {
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                let kv = kv as f64;
                if adjoint {
                    for x in 0..w {
                        acc[sy * w + x] += kv * src[base + y * w + x] as f64;
                    }
                } else {
                    for x in 0..w {
                        acc[y * w + x] += kv * src[base + sy * w + x] as f64;
                    }
                }
            }
        }
        for (o, a) in out[base..base + h * w].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    out
}

/// Blurs each of `planes` `h×w` planes with `kernel` along x, then y.
pub fn blur(src: &[f32], planes: usize, h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    if kernel.len() == 1 && kernel[0] == 1.0 {
        return src.to_vec();
    }
    let tmp = pass_x(src, planes, h, w, kernel, false);
    pass_y(&tmp, planes, h, w, kernel, false)
}

/// Transpose of [`blur`].
pub fn blur_adjoint(grad: &[f32], planes: usize, h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    if kernel.len() == 1 && kernel[0] == 1.0 {
        return grad.to_vec();
    }
    let tmp = pass_y(grad, planes, h, w, kernel, true);
    pass_x(&tmp, planes, h, w, kernel, true)
}
