mod common;

use common::*;
use odereg::fcn::{fcn_forward, init_params};
use odereg::image_io::{load_displacement, save_displacement, Image2D, Mask2D};
use odereg::losses::{dissimilarity, mse_value, ssim_value, LossConfig, LossMode};
use odereg::metrics::{dice, hausdorff, reliability, Region};
use odereg::optim::AdamState;
use odereg::pyramid::{coord_grid, gaussian_pyramid};
use odereg::synth::random_smooth_velocity;
use odereg::tensor::{blur, Tape, Tensor, Var};
use odereg::warp::{compose_fields, exp_velocity_field, jacobian_det, warp_image_value};
use odereg::{register, DeformationField, RegistrationConfig, VelocityField};
use proptest::prelude::*;
use rand::Rng;

/// Per-element gradient check with step `h`: every input element is
/// perturbed on its own and compared against the analytic partial.
/// Elements for which `skip` returns true are left out.
fn elementwise_rel_errors(
    inputs: &[Tensor],
    wrt: usize,
    h: f32,
    seed: u64,
    f: &dyn Fn(&mut Tape, &[Var]) -> odereg::Result<Var>,
    skip: &dyn Fn(usize) -> bool,
) -> f64 {
    let mut r = rng(seed);
    let output = |xs: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).clone()
    };
    let weights = uniform(&mut r, output(inputs).shape(), -1.0, 1.0);
    let reduce = |t: &Tensor| -> f64 { t.data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum() };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| if i == wrt { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap().get(vars[wrt]).unwrap().clone();
    let floor = 1e-2 * g.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;

    let mut worst = 0.0f64;
    for j in 0..g.len() {
        if skip(j) {
            continue;
        }
        let (mut plus, mut minus) = (inputs.to_vec(), inputs.to_vec());
        plus[wrt].data_mut()[j] += h;
        minus[wrt].data_mut()[j] -= h;
        let step = plus[wrt].data()[j] as f64 - minus[wrt].data()[j] as f64;
        let fd = (reduce(&output(&plus)) - reduce(&output(&minus))) / step;
        let an = g.data()[j] as f64;
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(floor));
    }
    worst
}

fn random_mask(seed: u64, w: usize, h: usize, labels: u8) -> Mask2D {
    let mut r = rng(seed);
    let img = smooth_image(&mut r, 1, h, w, 1.5, 0.0, 1.0);
    let data = img
        .data()
        .iter()
        .map(|&v| ((v * (labels + 1) as f32) as u8).min(labels))
        .collect();
    Mask2D::new(w, h, data).unwrap()
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_identity_kernel_is_identity(seed in any::<u64>(), c in 1usize..4, h in 3usize..12, w in 3usize..12) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, c, h, w], -1.0, 1.0);
        let weight = Tensor::from_fn(&[c, c, 5, 5], |i| {
            let (o, rest) = (i / (c * 25), i % (c * 25));
            let (ci, tap) = (rest / 25, rest % 25);
            if o == ci && tap == 12 { 1.0 } else { 0.0 }
        });
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(weight), tape.constant(Tensor::zeros(&[c])));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn identity_grid_sampling_reproduces_image(seed in any::<u64>(), c in 1usize..3, h in 2usize..40, w in 2usize..40) {
        let mut r = rng(seed);
        let img = uniform(&mut r, &[1, c, h, w], -1.0, 1.0);
        let mut tape = Tape::new();
        let (iv, gv) = (tape.constant(img.clone()), tape.constant(coord_grid(h, w).unwrap()));
        let out = tape.bilinear_sample(iv, gv).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let fixed = smooth_image(&mut r, 1, N, N, 1.5, 0.0, 1.0);
        let moving = smooth_image(&mut r, 1, N, N, 1.5, 0.0, 1.0);
        let v = smooth_field(&mut r, N, N, 2.0, 0.2);
        let run = || {
            let mut tape = Tape::new();
            let (f, m, vv) = (tape.constant(fixed.clone()), tape.constant(moving.clone()), tape.leaf(v.clone()));
            let d = odereg::warp::exp_velocity(&mut tape, vv).unwrap();
            let wm = odereg::warp::warp_image(&mut tape, m, d).unwrap();
            let loss = dissimilarity(&mut tape, f, wm, &LossConfig::default()).unwrap();
            tape.backward(loss).unwrap().get(vv).unwrap().clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn conv_gradients_elementwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 2, 7, 6], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 5, 5], -1.0, 1.0);
        let b = uniform(&mut r, &[3], -1.0, 1.0);
        let inputs = [x, w, b];
        let f = |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v[2]);
        for wrt in 0..3 {
            let e = elementwise_rel_errors(&inputs, wrt, 1e-3, seed, &f, &|_| false);
            prop_assert!(e <= 2e-2, "input {wrt}: {e:.2e}");
        }
    }

    #[test]
    fn relu_gradients_elementwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
        let near_kink = |j: usize| x.data()[j].abs() < 1e-2;
        let e = elementwise_rel_errors(&[x.clone()], 0, 1e-3, seed, &|t, v| t.relu(v[0]), &near_kink);
        prop_assert!(e <= 1e-3, "{e:.2e}");
    }

    #[test]
    fn bilinear_gradients_elementwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (7usize, 6usize);
        let img = uniform(&mut r, &[1, 2, h, w], -1.0, 1.0);
        let coords = uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
        let n = 25;
        // distance to the nearest cell boundary, in normalized units
        let near_boundary = |j: usize| {
            let extent = if j < n { w } else { h };
            let pos = (coords.data()[j] + 1.0) * 0.5 * (extent - 1) as f32;
            let px = 2.0 / (extent - 1) as f32;
            (pos - pos.round()).abs() * px < 1e-2
        };
        let f = |t: &mut Tape, v: &[Var]| t.bilinear_sample(v[0], v[1]);
        let inputs = [img, coords.clone()];
        let e_img = elementwise_rel_errors(&inputs, 0, 1e-3, seed, &f, &|_| false);
        let e_xy = elementwise_rel_errors(&inputs, 1, 1e-3, seed, &f, &near_boundary);
        prop_assert!(e_img <= 2e-2, "image {e_img:.2e}");
        prop_assert!(e_xy <= 2e-2, "coords {e_xy:.2e}");
    }

    #[test]
    fn blur_gradients_elementwise(seed in any::<u64>(), sigma in 0.5f32..2.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 2, 9, 8], -1.0, 1.0);
        let k = blur::gaussian_kernel_3sigma(sigma);
        let e = elementwise_rel_errors(&[x], 0, 1e-3, seed, &|t, v| t.blur(v[0], k.clone()), &|_| false);
        prop_assert!(e <= 2e-2, "{e:.2e}");
    }

    #[test]
    fn arithmetic_gradients_elementwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[1, 2, 5, 6], -1.0, 1.0);
        // divisor kept away from zero
        let b = Tensor::from_fn(a.shape(), |_| r.gen_range(0.5f32..1.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 });
        let ops: [(&str, usize, &dyn Fn(&mut Tape, &[Var]) -> odereg::Result<Var>); 6] = [
            ("add", 2, &|t, v| t.add(v[0], v[1])),
            ("sub", 2, &|t, v| t.sub(v[0], v[1])),
            ("mul", 2, &|t, v| t.mul(v[0], v[1])),
            ("div", 2, &|t, v| t.div(v[0], v[1])),
            ("scale", 1, &|t, v| t.scale(v[0], -1.7)),
            ("add_scalar", 1, &|t, v| t.add_scalar(v[0], 0.3)),
        ];
        for (name, arity, f) in ops {
            for wrt in 0..arity {
                let e = elementwise_rel_errors(&[a.clone(), b.clone()], wrt, 1e-3, seed, f, &|_| false);
                prop_assert!(e <= 1e-3, "{name} input {wrt}: {e:.2e}");
            }
        }
    }

    #[test]
    fn displacement_files_round_trip(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
        let mut r = rng(seed);
        let t = uniform(&mut r, &[1, 2, h, w], -3.0, 3.0);
        let d = DeformationField::from_tensor(t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dfld");
        save_displacement(&d, &path).unwrap();
        prop_assert_eq!(load_displacement(&path).unwrap(), d);
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>(), h in 8usize..20, w in 8usize..20) {
        let mut r = rng(seed);
        let raw = uniform(&mut r, &[h * w], -50.0, 300.0);
        let once = Image2D::normalized(w, h, raw.data()).unwrap();
        let twice = Image2D::normalized(w, h, once.pixels()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn pyramid_preserves_mean(seed in any::<u64>(), levels in 1usize..4) {
        // smooth blobs on a flat background: the decimation grid's
        // half-pixel offset and the reflected borders then see no gradient
        let mut r = rng(seed);
        let (h, w) = (64usize, 48usize);
        let blobs: Vec<(f32, f32, f32, f32)> = (0..4)
            .map(|_| {
                (
                    r.gen_range(-0.3f32..0.3),
                    r.gen_range(0.35f32..0.65) * w as f32,
                    r.gen_range(0.35f32..0.65) * h as f32,
                    r.gen_range(2.0f32..5.0),
                )
            })
            .collect();
        let px = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f32, (i / w) as f32);
                let bump = |&(a, cx, cy, s): &(f32, f32, f32, f32)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp();
                (0.5 + blobs.iter().map(bump).sum::<f32>()).clamp(0.0, 1.0)
            })
            .collect();
        let img = Image2D::new(w, h, px).unwrap();
        let pyr = gaussian_pyramid(&img, levels).unwrap();
        let m0 = mean(img.pixels());
        for lv in pyr.levels() {
            prop_assert!((mean(lv.pixels()) - m0).abs() < 1e-3, "{} vs {m0}", mean(lv.pixels()));
        }
    }

    #[test]
    fn coord_grid_is_antisymmetric(h in 2usize..40, w in 2usize..40) {
        let g = coord_grid(h, w).unwrap();
        let n = h * w;
        for p in 0..n {
            let q = n - 1 - p;
            prop_assert_eq!(g.data()[p], -g.data()[q]);
            prop_assert_eq!(g.data()[n + p], -g.data()[n + q]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exponential_is_diffeomorphic(seed in any::<u64>(), amp in 0.5f32..16.0, sigma in 4.0f32..10.0) {
        let v = random_smooth_velocity(seed, amp, sigma, 64, 64).unwrap();
        let d = exp_velocity_field(&v).unwrap();
        prop_assert!(jacobian_det(&d).unwrap().iter().all(|&j| j > 0.0));
    }

    #[test]
    fn compose_is_associative(seed in any::<u64>()) {
        let fields: Vec<DeformationField> = (0..3)
            .map(|k| exp_velocity_field(&random_smooth_velocity(seed.wrapping_add(k), 3.0, 6.0, 48, 48).unwrap()).unwrap())
            .collect();
        let left = compose_fields(&compose_fields(&fields[0], &fields[1]).unwrap(), &fields[2]).unwrap();
        let right = compose_fields(&fields[0], &compose_fields(&fields[1], &fields[2]).unwrap()).unwrap();
        prop_assert!(interior_mean_distance(&left, &right, 0) < 0.05);
    }

    #[test]
    fn opposite_exponentials_cancel(seed in any::<u64>(), amp in 0.5f32..5.0) {
        let v = random_smooth_velocity(seed, amp, 6.0, 48, 48).unwrap();
        let fwd = exp_velocity_field(&v).unwrap();
        let inv = exp_velocity_field(&v.negated()).unwrap();
        let id = DeformationField::identity(48, 48);
        prop_assert!(interior_mean_distance(&compose_fields(&fwd, &inv).unwrap(), &id, 0) < 0.1);
        prop_assert!(interior_mean_distance(&compose_fields(&inv, &fwd).unwrap(), &id, 0) < 0.1);
    }

    #[test]
    fn velocity_amplitude_is_exact(seed in any::<u64>(), amp in 0.0f32..10.0, sigma in 1.0f32..8.0) {
        let v = random_smooth_velocity(seed, amp, sigma, 40, 48).unwrap();
        prop_assert!((v.max_norm_px() - amp).abs() <= 1e-6 * amp.max(1.0) * 4.0);
        prop_assert_eq!(v, random_smooth_velocity(seed, amp, sigma, 40, 48).unwrap());
    }

    #[test]
    fn network_is_shift_covariant(seed in any::<u64>()) {
        let mut params = init_params(seed);
        let mut r = rng(seed);
        *params.weight_mut(3) = uniform(&mut r, params.weight(3).shape(), -0.05, 0.05);
        let (h, w) = (14usize, 18usize);
        let x = uniform(&mut r, &[2, 2, h, w + 1], -1.0, 1.0);
        // the same content cropped at two column offsets
        let crop = |part: usize, off: usize| Tensor::from_fn(&[1, 2, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            x.data()[(part * 2 + c) * h * (w + 1) + (rest / w) * (w + 1) + rest % w + off]
        });
        let run = |off: usize| {
            let mut tape = Tape::new();
            let net = params.attach(&mut tape);
            let (a, b) = (tape.constant(crop(0, off)), tape.constant(crop(1, off)));
            let out = fcn_forward(&mut tape, &net, a, b).unwrap();
            tape.value(out).clone()
        };
        let (y0, y1) = (run(0), run(1));
        // receptive field radius is 8 px; compare only columns it cannot see past
        for c in 0..2 {
            for i in 0..h {
                for j in 8..w - 9 {
                    let a = y0.data()[c * h * w + i * w + j + 1];
                    let b = y1.data()[c * h * w + i * w + j];
                    prop_assert!((a - b).abs() <= 1e-5, "({c},{i},{j}) {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn aligned_beats_translated(seed in any::<u64>(), shift in 1usize..4) {
        let mut r = rng(seed);
        let img = smooth_image(&mut r, 1, 24, 24 + shift, 1.5, 0.0, 1.0);
        let window = |off: usize| Tensor::from_fn(&[1, 1, 24, 24], |i| img.data()[(i / 24) * (24 + shift) + i % 24 + off]);
        let (fixed, moved) = (window(0), window(shift));
        for mode in [LossMode::Mse, LossMode::Ssim, LossMode::SsimMi] {
            let cfg = LossConfig { mode, ..Default::default() };
            let cost = |b: &Tensor| {
                let mut tape = Tape::new();
                let (a, b) = (tape.constant(fixed.clone()), tape.constant(b.clone()));
                let l = dissimilarity(&mut tape, a, b, &cfg).unwrap();
                tape.value(l).item()
            };
            prop_assert!(cost(&fixed) < cost(&moved), "{mode}");
        }
    }

    #[test]
    fn self_similarity_is_optimal(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
        let b = uniform(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
        prop_assert!(mse_value(&a, &a).unwrap() <= mse_value(&a, &b).unwrap() + 1e-6);
        prop_assert!(-ssim_value(&a, &a, 11).unwrap() <= -ssim_value(&a, &b, 11).unwrap() + 1e-6);
    }

    #[test]
    fn adam_is_deterministic_and_lr0_is_fixed(seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[5], -1.0, 1.0)];
        let grads: Vec<Vec<Tensor>> = (0..5)
            .map(|_| vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[5], -1.0, 1.0)])
            .collect();
        let run = |lr: f32| {
            let mut p = params.clone();
            let mut adam = AdamState::new(&p);
            for g in &grads {
                adam.step(&mut p, g, lr).unwrap();
            }
            prop_assert_eq!(adam.step_count(), 5);
            Ok(p)
        };
        prop_assert_eq!(run(1e-2)?, run(1e-2)?);
        prop_assert_eq!(run(0.0)?, params.clone());
    }

    #[test]
    fn metric_symmetries(sa in any::<u64>(), sb in any::<u64>(), label in 1u8..3) {
        let (a, b) = (random_mask(sa, 20, 18, 2), random_mask(sb, 20, 18, 2));
        let region = Region::Label(label);
        let d = dice(&a, &b, region).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&b, &a, region).unwrap());
        if let (Ok(ab), Ok(ba)) = (hausdorff(&a, &b, region), hausdorff(&b, &a, region)) {
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(hausdorff(&a, &a, region).unwrap(), 0.0);
        }
    }

    #[test]
    fn reliability_is_a_survival_function(seed in any::<u64>(), len in 1usize..30) {
        let mut r = rng(seed);
        let dices: Vec<f64> = (0..len).map(|_| r.gen_range(0.001..=1.0)).collect();
        prop_assert_eq!(reliability(&dices, 0.0).unwrap(), 1.0);
        prop_assert_eq!(reliability(&dices, 1.0).unwrap(), 0.0);
        let mut prev = 1.0;
        for k in 0..=20 {
            let rv = reliability(&dices, k as f64 / 20.0).unwrap();
            prop_assert!(rv <= prev);
            prev = rv;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn registration_trace_and_determinism(seed in any::<u64>(), iterations in 1usize..6, bidirectional in any::<bool>()) {
        let mut r = rng(seed);
        let fixed = Image2D::new(24, 24, smooth_image(&mut r, 1, 24, 24, 1.5, 0.0, 1.0).into_data()).unwrap();
        let v = VelocityField::from_tensor(smooth_field(&mut r, 24, 24, 4.0, 0.1)).unwrap();
        let moving = warp_image_value(&fixed, &exp_velocity_field(&v).unwrap()).unwrap();
        let cfg = RegistrationConfig { iterations, bidirectional, seed, levels: 1, ..Default::default() };
        let a = register(&moving, &fixed, &cfg).unwrap();
        let b = register(&moving, &fixed, &cfg).unwrap();
        prop_assert_eq!(a.loss_trace.len(), iterations);
        prop_assert_eq!(&a.loss_trace, &b.loss_trace);
        prop_assert_eq!(a.forward, b.forward);
        prop_assert!(a.loss_trace.iter().all(|l| l.is_finite()));
        prop_assert_eq!(a.backward.is_some(), bidirectional);
    }
}
