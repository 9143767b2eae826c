#![allow(dead_code)]

use odereg::losses::{mse, soft_mutual_information, ssim, total_loss, LevelTerms, LossConfig, LossMode};
use odereg::pyramid::coord_grid;
use odereg::tensor::{blur, Tape, Tensor, Var};
use odereg::warp::{compose, exp_velocity, smooth_velocity, DeformationField};
use odereg::Result;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 16;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let d = Uniform::new(lo, hi);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| d.sample(rng)).collect()).unwrap()
}

/// Blurred noise rescaled to `[lo, hi]`.
pub fn smooth_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, sigma: f32, lo: f32, hi: f32) -> Tensor {
    let noise = uniform(rng, &[1, c, h, w], -1.0, 1.0);
    let s = blur::blur(noise.data(), c, h, w, &blur::gaussian_kernel_3sigma(sigma));
    let (min, max) = s.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let data = s.iter().map(|&v| lo + (hi - lo) * (v - min) / (max - min)).collect();
    Tensor::new(&[1, c, h, w], data).unwrap()
}

/// Smooth field with largest component exactly `amp` (normalized units).
pub fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f32, amp: f32) -> Tensor {
    let t = smooth_image(rng, 2, h, w, sigma, -1.0, 1.0);
    let peak = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    Tensor::from_fn(t.shape(), |i| t.data()[i] / peak * amp)
}

pub fn grid(h: usize, w: usize) -> Tensor {
    coord_grid(h, w).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Largest relative error between analytic and central-difference
/// directional derivatives, over every differentiable input and two
/// directions per input.
///
/// Non-scalar outputs are reduced with fixed random weights. Directions are
/// the normalized analytic gradient and a half-random blend of it, so an
/// error orthogonal to the gradient still shows up.
pub fn directional_error(rng: &mut ChaCha8Rng, inputs: &[Tensor], wrt: &[usize], eps: f32, f: &Graph) -> f64 {
    let eval = |xs: &[Tensor], grads: bool, weights: Option<&Tensor>| -> (Tensor, Option<Vec<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| if wrt.contains(&i) { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        let value = tape.value(out).clone();
        if !grads {
            return (value, None);
        }
        let loss = match weights {
            Some(r) if value.len() > 1 => {
                let r = tape.constant(r.clone());
                let p = tape.mul(out, r).unwrap();
                tape.sum(p).unwrap()
            }
            _ => out,
        };
        let g = tape.backward(loss).unwrap();
        (value, Some(wrt.iter().map(|&i| g.get(vars[i]).unwrap().clone()).collect()))
    };
    let (probe, _) = eval(inputs, false, None);
    let weights = uniform(rng, probe.shape(), -1.0, 1.0);
    let reduce = |t: &Tensor| -> f64 {
        if t.len() == 1 {
            t.item() as f64
        } else {
            t.data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
        }
    };
    let (_, grads) = eval(inputs, true, Some(&weights));
    let grads = grads.unwrap();
    let mut worst = 0.0f64;
    for (k, &i) in wrt.iter().enumerate() {
        let g = &grads[k];
        let gmax = g.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(gmax > 0.0, "input {i}: analytic gradient vanishes");
        let noise = uniform(rng, g.shape(), -1.0, 1.0);
        let blend = Tensor::from_fn(g.shape(), |j| g.data()[j] / gmax + noise.data()[j]);
        for dir in [Tensor::from_fn(g.shape(), |j| g.data()[j] / gmax), blend] {
            let dmax = dir.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = Tensor::from_fn(g.shape(), |j| inputs[i].data()[j] + eps * dir.data()[j] / dmax);
            minus[i] = Tensor::from_fn(g.shape(), |j| inputs[i].data()[j] - eps * dir.data()[j] / dmax);
            let fd = reduce(&eval(&plus, false, None).0) - reduce(&eval(&minus, false, None).0);
            // the f32 steps actually taken
            let an: f64 = (0..g.len())
                .map(|j| g.data()[j] as f64 * (plus[i].data()[j] as f64 - minus[i].data()[j] as f64))
                .sum();
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-30);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Elementwise check for ops whose Jacobian is diagonal: every coordinate
/// is perturbed separately.
pub fn elementwise_error(rng: &mut ChaCha8Rng, x: &Tensor, eps: f32, f: &Graph) -> f64 {
    let weights = uniform(rng, x.shape(), 0.5, 1.5);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, &[v]).unwrap();
    let r = tape.constant(weights.clone());
    let p = tape.mul(out, r).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap().get(v).unwrap().clone();
    let single = |x: &Tensor| -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, &[v]).unwrap();
        tape.value(out).clone()
    };
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[j] += eps;
        minus.data_mut()[j] -= eps;
        let (op, om) = (single(&plus), single(&minus));
        let fd = (op.data()[j] as f64 - om.data()[j] as f64) * weights.data()[j] as f64;
        let an = g.data()[j] as f64 * (plus.data()[j] as f64 - minus.data()[j] as f64);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-30);
        worst = worst.max(rel);
    }
    worst
}

/// Coordinates whose sampling positions stay at least 0.1 px away from pixel
/// centers, where bilinear interpolation has kinks.
pub fn off_lattice_coords(rng: &mut ChaCha8Rng, h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
    let frac = Uniform::new(0.1f32, 0.9);
    let mut data = Vec::with_capacity(2 * ho * wo);
    for n in [w, h] {
        let cell = Uniform::new(0usize, n - 1);
        for _ in 0..ho * wo {
            let pos = cell.sample(rng) as f32 + frac.sample(rng);
            data.push(pos * 2.0 / (n - 1) as f32 - 1.0);
        }
    }
    Tensor::new(&[1, 2, ho, wo], data).unwrap()
}

/// Amplitude whose squaring count sits mid-way between two thresholds, so
/// finite-difference steps never change it.
pub fn stable_velocity_amplitude(rng: &mut ChaCha8Rng, n: usize) -> f32 {
    let half_px = 1.0 / n as f32;
    let octave = rng.gen_range(0..3) as f32;
    half_px * 2f32.powf(octave + rng.gen_range(0.3..0.7))
}

pub struct GradCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub instances: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

pub const INSTANCES: usize = 10;
const TOL: f64 = 2e-2;
const TOL_ELEMENTWISE: f64 = 1e-3;

fn run(name: &'static str, tol: f64, seed: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> GradCheck {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut r = rng(seed * 1000 + i as u64);
        worst = worst.max(one(&mut r));
    }
    GradCheck {
        name,
        worst,
        tol,
        instances: INSTANCES,
    }
}

fn level_loss(tape: &mut Tape, v: &[Var], mode: LossMode, bidirectional: bool) -> Result<Var> {
    let cfg = LossConfig {
        mode,
        ..Default::default()
    };
    let lv = LevelTerms {
        fixed: v[0],
        moving: v[1],
        grid: v[2],
        forward: v[3],
        backward: bidirectional.then(|| v[4]),
    };
    total_loss(tape, &[lv], &cfg)
}

/// Gradient checks for every differentiable operation on random 16×16
/// instances.
pub fn gradient_suite() -> Vec<GradCheck> {
    let mut out = Vec::new();

    out.push(run("conv2d", TOL, 1, |r| {
        let x = uniform(r, &[1, 3, N, N], -1.0, 1.0);
        let w = uniform(r, &[4, 3, 5, 5], -0.3, 0.3);
        let b = uniform(r, &[4], -0.5, 0.5);
        let a = directional_error(r, &[x.clone(), w.clone(), b.clone()], &[0, 1, 2], 1e-2, &|t, v| t.conv2d(v[0], v[1], v[2]));
        // the GEMM path (more than four output channels)
        let w = uniform(r, &[6, 3, 5, 5], -0.3, 0.3);
        let b = uniform(r, &[6], -0.5, 0.5);
        a.max(directional_error(r, &[x, w, b], &[0, 1, 2], 1e-2, &|t, v| t.conv2d(v[0], v[1], v[2])))
    }));

    out.push(run("relu", TOL_ELEMENTWISE, 2, |r| {
        // keep inputs clear of the kink at zero
        let x = Tensor::from_fn(&[1, 2, N, N], |_| {
            let m = r.gen_range(0.05f32..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        });
        elementwise_error(r, &x, 1e-2, &|t, v| t.relu(v[0]))
    }));

    out.push(run("bilinear_sample", TOL, 3, |r| {
        let img = smooth_image(r, 2, N, N, 1.5, 0.0, 1.0);
        let coords = off_lattice_coords(r, N, N, N, N);
        directional_error(r, &[img, coords], &[0, 1], 1e-3, &|t, v| t.bilinear_sample(v[0], v[1]))
    }));

    out.push(run("exp_velocity", TOL, 4, |r| {
        let amp = stable_velocity_amplitude(r, N);
        let v = smooth_field(r, N, N, 2.0, amp);
        directional_error(r, &[v], &[0], 1e-4, &|t, v| exp_velocity(t, v[0]))
    }));

    out.push(run("compose", TOL, 5, |r| {
        let g = grid(N, N);
        let outer = add(&g, &smooth_field(r, N, N, 2.0, 0.3));
        let inner = add(&g, &smooth_field(r, N, N, 2.0, 0.3));
        directional_error(r, &[outer, inner], &[0, 1], 1e-3, &|t, v| compose(t, v[0], v[1]))
    }));

    out.push(run("smooth_velocity", TOL, 6, |r| {
        let v = uniform(r, &[1, 2, N, N], -0.2, 0.2);
        let sigma = r.gen_range(0.5f32..2.0);
        directional_error(r, &[v], &[0], 1e-2, &|t, v| smooth_velocity(t, v[0], sigma))
    }));

    out.push(run("ssim", TOL, 7, |r| {
        let a = smooth_image(r, 1, N, N, 1.0, 0.05, 0.95);
        let b = smooth_image(r, 1, N, N, 1.0, 0.05, 0.95);
        directional_error(r, &[a, b], &[0, 1], 1e-2, &|t, v| ssim(t, v[0], v[1], 11))
    }));

    out.push(run("soft_mutual_information", TOL, 8, |r| {
        let a = smooth_image(r, 1, N, N, 1.0, 0.05, 0.95);
        let b = Tensor::from_fn(a.shape(), |i| (0.8 * a.data()[i] + 0.2 * r.gen_range(0.0f32..1.0)).clamp(0.05, 0.95));
        directional_error(r, &[a, b], &[0, 1], 1e-3, &|t, v| soft_mutual_information(t, v[0], v[1], 16))
    }));

    out.push(run("mse", TOL_ELEMENTWISE, 9, |r| {
        let a = uniform(r, &[1, 1, N, N], 0.0, 1.0);
        let b = uniform(r, &[1, 1, N, N], 0.0, 1.0);
        directional_error(r, &[a, b], &[0, 1], 1e-2, &|t, v| mse(t, v[0], v[1]))
    }));

    for (name, mode, bidir, seed) in [
        ("total_loss (ssim+mi, bidirectional)", LossMode::SsimMi, true, 10),
        ("total_loss (ssim, forward only)", LossMode::Ssim, false, 11),
        ("total_loss (mse, bidirectional)", LossMode::Mse, true, 12),
    ] {
        out.push(run(name, TOL, seed, |r| {
            let fixed = smooth_image(r, 1, N, N, 1.5, 0.05, 0.95);
            let moving = smooth_image(r, 1, N, N, 1.5, 0.05, 0.95);
            let g = grid(N, N);
            let fwd = add(&g, &smooth_field(r, N, N, 2.0, 0.15));
            let bwd = add(&g, &smooth_field(r, N, N, 2.0, 0.15));
            let wrt: &[usize] = if bidir { &[3, 4] } else { &[3] };
            directional_error(r, &[fixed, moving, g, fwd, bwd], wrt, 1e-3, &|t, v| level_loss(t, v, mode, bidir))
        }));
    }


    out
}

/// Pull-back map of a 200-step forward Euler integration of the stationary
/// flow `dx/dt = v(x)`, sampling `v` bilinearly with border clamping. Plain
/// f64 arithmetic, independent of the tape.
pub fn euler_flow(v: &Tensor, h: usize, w: usize, steps: usize) -> Vec<[f64; 2]> {
    let n = h * w;
    let sample = |plane: &[f32], x: f64, y: f64| -> f64 {
        let px = ((x + 1.0) * 0.5 * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
        let py = ((y + 1.0) * 0.5 * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = ((px.floor() as usize).min(w - 2), (py.floor() as usize).min(h - 2));
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let at = |xx: usize, yy: usize| plane[yy * w + xx] as f64;
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
    };
    let (vx, vy) = v.data().split_at(n);
    let dt = 1.0 / steps as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..h {
        for j in 0..w {
            let mut x = -1.0 + 2.0 * j as f64 / (w - 1) as f64;
            let mut y = -1.0 + 2.0 * i as f64 / (h - 1) as f64;
            for _ in 0..steps {
                let (dx, dy) = (sample(vx, x, y), sample(vy, x, y));
                x += dt * dx;
                y += dt * dy;
            }
            out.push([x, y]);
        }
    }
    out
}

/// Mean pixel distance between two fields over pixels at least `margin`
/// away from the border.
pub fn interior_mean_distance(a: &DeformationField, b: &DeformationField, margin: usize) -> f64 {
    let (h, w) = (a.height(), a.width());
    let (da, db) = (a.displacement_px(), b.displacement_px());
    let n = h * w;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let p = y * w + x;
            sum += ((da[p] - db[p]) as f64).hypot((da[n + p] - db[n + p]) as f64);
            count += 1;
        }
    }
    sum / count as f64
}
