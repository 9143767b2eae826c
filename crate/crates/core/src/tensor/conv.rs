//! Stride-1, same-padded 2-D cross-correlation lowered to a single GEMM
//! through an im2col buffer.

use std::cell::RefCell;

/// Fills `cols` (`[cin * k * k, h * w]`, row-major) with the zero-padded
/// patches of `input` (`[cin, h, w]`).
pub fn im2col(input: &[f32], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), cin * k * k * hw);
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                // valid output columns for this horizontal offset
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `grad` (`[cin, h, w]`).
pub fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, grad: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut grad[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d0 = sy as usize * w + (x_lo as isize + dx) as usize;
                    let dst = &mut plane[d0..d0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit row/column
/// strides for `a` and `b` so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let max_a = (m as isize - 1) * rsa + (k as isize - 1).max(0) * csa;
    let max_b = (k as isize - 1).max(0) * rsb + (n as isize - 1) * csb;
    assert!(k == 0 || (max_a < a.len() as isize && max_b < b.len() as isize));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    // im2col and column-gradient buffers, reused across calls so the large
    // allocations are not faulted in afresh every time
    static SCRATCH: RefCell<(Vec<f32>, Vec<f32>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn sized(buf: &mut Vec<f32>, len: usize) -> &mut [f32] {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    &mut buf[..len]
}

/// Output channel count below which the direct loops beat im2col + GEMM.
const DIRECT_MAX_COUT: usize = 4;

/// Visits every (kernel tap, output row) pair whose source row is inside the
/// image, with the valid output column range for that tap.
#[inline]
fn for_each_tap(h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let pad = (k / 2) as isize;
    for ky in 0..k {
        for kx in 0..k {
            let dx = kx as isize - pad;
            let dy = ky as isize - pad;
            let x_lo = (-dx).max(0) as usize;
            let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let s0 = sy as usize * w + (x_lo as isize + dx) as usize;
                f(ky * k + kx, y * w + x_lo, s0, x_hi - x_lo, y, sy as usize);
            }
        }
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

fn direct_forward(input: &[f32], weight: &[f32], cin: usize, cout: usize, h: usize, w: usize, k: usize, out: &mut [f32]) {
    let hw = h * w;
    for co in 0..cout {
        let dst = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            let taps = &weight[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for_each_tap(h, w, k, |tap, d0, s0, len, _, _| {
                let wv = taps[tap];
                for (o, i) in dst[d0..d0 + len].iter_mut().zip(&src[s0..s0 + len]) {
                    *o += wv * i;
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward(
    grad_out: &[f32],
    input: &[f32],
    weight: &[f32],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    grad_w: &mut [f32],
    mut grad_in: Option<&mut [f32]>,
) {
    let hw = h * w;
    let mut acc = vec![0.0f64; k * k];
    for co in 0..cout {
        let g = &grad_out[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            let base = (co * cin + ci) * k * k;
            let taps = &weight[base..base + k * k];
            acc.fill(0.0);
            for_each_tap(h, w, k, |tap, d0, s0, len, _, _| {
                acc[tap] += dot(&g[d0..d0 + len], &src[s0..s0 + len]) as f64;
            });
            for (gw, a) in grad_w[base..base + k * k].iter_mut().zip(&acc) {
                *gw = *a as f32;
            }
            if let Some(gi) = grad_in.as_deref_mut() {
                let dst = &mut gi[ci * hw..(ci + 1) * hw];
                for_each_tap(h, w, k, |tap, d0, s0, len, _, _| {
                    let wv = taps[tap];
                    for (o, gv) in dst[s0..s0 + len].iter_mut().zip(&g[d0..d0 + len]) {
                        *o += wv * gv;
                    }
                });
            }
        }
    }
}

/// Forward convolution: `output [cout, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f32> {
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = vec![0.0f32; cout * hw];
    for (co, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    if cout <= DIRECT_MAX_COUT {
        direct_forward(input, weight, cin, cout, h, w, k, &mut out);
        return out;
    }
    SCRATCH.with(|s| {
        let s = &mut *s.borrow_mut();
        let cols = sized(&mut s.0, kk * hw);
        im2col(input, cin, h, w, k, cols);
        gemm(cout, kk, hw, weight, (kk as isize, 1), cols, (hw as isize, 1), 1.0, &mut out);
    });
    out
}

/// Gradients of a forward convolution given the upstream gradient `grad_out`.
/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is only
/// computed when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad_out: &[f32],
    input: &[f32],
    weight: &[f32],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    need_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let hw = h * w;
    let kk = cin * k * k;
    let grad_b = grad_out
        .chunks_exact(hw)
        .map(|row| row.iter().map(|&g| g as f64).sum::<f64>() as f32)
        .collect();
    let mut grad_w = vec![0.0f32; cout * kk];
    if cout <= DIRECT_MAX_COUT {
        let mut grad_in = need_input.then(|| vec![0.0f32; cin * hw]);
        direct_backward(grad_out, input, weight, cin, cout, h, w, k, &mut grad_w, grad_in.as_deref_mut());
        return (grad_in, grad_w, grad_b);
    }
    SCRATCH.with(|s| {
        let s = &mut *s.borrow_mut();
        let cols = sized(&mut s.0, kk * hw);
        im2col(input, cin, h, w, k, cols);
        // grad_w[cout×kk] = grad_out[cout×hw] · colsᵀ[hw×kk]
        gemm(cout, hw, kk, grad_out, (hw as isize, 1), cols, (1, hw as isize), 0.0, &mut grad_w);
        let grad_in = need_input.then(|| {
            let grad_cols = sized(&mut s.1, kk * hw);
            // grad_cols[kk×hw] = weightᵀ[kk×cout] · grad_out[cout×hw]
            gemm(kk, cout, hw, weight, (1, kk as isize), grad_out, (hw as isize, 1), 0.0, grad_cols);
            let mut grad_in = vec![0.0f32; cin * hw];
            col2im(grad_cols, cin, h, w, k, &mut grad_in);
            grad_in
        });
        (grad_in, grad_w, grad_b)
    })
}
