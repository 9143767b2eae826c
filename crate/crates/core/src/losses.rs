//! Similarity and consistency terms of the registration objective.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{blur, CustomOp, Tape, Tensor, Var};
use crate::warp::{compose, warp_image};

pub const SSIM_C1: f32 = 1e-4;
pub const SSIM_C2: f32 = 9e-4;
pub const SSIM_SIGMA: f32 = 1.5;
const MI_FLOOR: f64 = 1e-12;

/// Image similarity term, expressed as a quantity to minimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "mse")]
    Mse,
    /// `1 − SSIM`
    #[serde(rename = "ssim")]
    Ssim,
    /// `(1 − SSIM) − MI`
    #[serde(rename = "ssim+mi")]
    SsimMi,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "ssim" => Ok(Self::Ssim),
            "ssim+mi" => Ok(Self::SsimMi),
            other => Err(Error::Config(format!("unknown loss mode {other:?} (mse, ssim, ssim+mi)"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Ssim => "ssim",
            Self::SsimMi => "ssim+mi",
        })
    }
}

impl LossMode {
    pub fn uses_ssim(self) -> bool {
        matches!(self, Self::Ssim | Self::SsimMi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Inverse-consistency weight.
    pub alpha: f32,
    /// Weight of the `mean ‖φ − x‖²` regularizer.
    pub gamma: f32,
    pub mi_bins: usize,
    pub ssim_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::SsimMi,
            alpha: 0.5,
            gamma: 2.5,
            mi_bins: 16,
            ssim_window: 11,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "alpha ({}) and gamma ({}) must be finite and non-negative",
                self.alpha, self.gamma
            )));
        }
        if self.mi_bins < 4 {
            return Err(Error::Config(format!("mi_bins must be at least 4, got {}", self.mi_bins)));
        }
        if self.ssim_window % 2 == 0 || self.ssim_window < 3 {
            return Err(Error::Config(format!("ssim_window must be odd and >= 3, got {}", self.ssim_window)));
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(contract(op, format!("shape mismatch {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mse")?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Mean SSIM with a Gaussian window (σ = 1.5) and reflected borders.
pub fn ssim(tape: &mut Tape, a: Var, b: Var, window: usize) -> Result<Var> {
    same_shape(tape, a, b, "ssim")?;
    let (_, h, w) = tape.value(a).chw("ssim")?;
    if window % 2 == 0 {
        return Err(contract("ssim", format!("window {window} must be odd")));
    }
    if h < window || w < window {
        return Err(contract("ssim", format!("image {h}x{w} is smaller than the {window}x{window} window")));
    }
    let kernel = blur::gaussian_kernel(SSIM_SIGMA, window / 2);
    let mu_a = tape.blur(a, kernel.clone())?;
    let mu_b = tape.blur(b, kernel.clone())?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.blur(aa, kernel.clone())?;
    let e_bb = tape.blur(bb, kernel.clone())?;
    let e_ab = tape.blur(ab, kernel)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.scale(mu_ab, 2.0)?;
    let l_num = tape.add_scalar(l_num, SSIM_C1)?;
    let c_num = tape.scale(cov, 2.0)?;
    let c_num = tape.add_scalar(c_num, SSIM_C2)?;
    let l_den = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(l_den, SSIM_C1)?;
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, SSIM_C2)?;
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// Normalized Parzen weights of `v` over `bins` Gaussian bins, plus the
/// score `d ln e_k / dv` needed for the backward pass.
fn parzen(v: f32, bins: usize, weights: &mut [f64], scores: &mut [f64]) {
    let b = bins as f64;
    let sigma2 = 1.0 / (b * b);
    let v = v as f64;
    let mut logs = [0.0f64; 256];
    let logs = &mut logs[..bins];
    for k in 0..bins {
        let d = v - (k as f64 + 0.5) / b;
        logs[k] = -d * d / (2.0 * sigma2);
        scores[k] = -d / sigma2;
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for k in 0..bins {
        weights[k] = (logs[k] - top).exp();
        total += weights[k];
    }
    weights.iter_mut().for_each(|w| *w /= total);
}

struct Histogram {
    joint: Vec<f64>,
    pa: Vec<f64>,
    pb: Vec<f64>,
}

fn joint_histogram(a: &[f32], b: &[f32], bins: usize) -> Histogram {
    let mut joint = vec![0.0f64; bins * bins];
    let (mut wa, mut wb) = (vec![0.0; bins], vec![0.0; bins]);
    let mut scratch = vec![0.0; bins];
    for (&va, &vb) in a.iter().zip(b) {
        parzen(va, bins, &mut wa, &mut scratch);
        parzen(vb, bins, &mut wb, &mut scratch);
        for (k, &x) in wa.iter().enumerate() {
            for (l, &y) in wb.iter().enumerate() {
                joint[k * bins + l] += x * y;
            }
        }
    }
    let n = a.len() as f64;
    joint.iter_mut().for_each(|p| *p /= n);
    let pa = (0..bins).map(|k| joint[k * bins..(k + 1) * bins].iter().sum()).collect();
    let pb = (0..bins).map(|l| (0..bins).map(|k| joint[k * bins + l]).sum()).collect();
    Histogram { joint, pa, pb }
}

fn mi_from(h: &Histogram, bins: usize) -> f64 {
    let mut mi = 0.0;
    for k in 0..bins {
        for l in 0..bins {
            let p = h.joint[k * bins + l];
            if p >= MI_FLOOR {
                mi += p * (p.ln() - h.pa[k].ln() - h.pb[l].ln());
            }
        }
    }
    mi
}

struct SoftMi {
    bins: usize,
    hist: Histogram,
}

impl SoftMi {
    /// `∂MI/∂wa_i` contracted with the per-pixel weight Jacobian.
    fn pixel_grads(&self, own: &[f32], other: &[f32], g: &[f64], own_is_row: bool) -> Vec<f32> {
        let bins = self.bins;
        let n = own.len() as f64;
        let (mut wo, mut wt) = (vec![0.0; bins], vec![0.0; bins]);
        let (mut so, mut st) = (vec![0.0; bins], vec![0.0; bins]);
        let mut out = Vec::with_capacity(own.len());
        for (&v, &u) in own.iter().zip(other) {
            parzen(v, bins, &mut wo, &mut so);
            parzen(u, bins, &mut wt, &mut st);
            let sbar: f64 = wo.iter().zip(&so).map(|(w, s)| w * s).sum();
            let mut acc = 0.0;
            for k in 0..bins {
                let mut dk = 0.0;
                for l in 0..bins {
                    let gkl = if own_is_row { g[k * bins + l] } else { g[l * bins + k] };
                    dk += gkl * wt[l];
                }
                acc += dk / n * wo[k] * (so[k] - sbar);
            }
            out.push(acc as f32);
        }
        out
    }
}

impl CustomOp for SoftMi {
    fn name(&self) -> &'static str {
        "soft_mutual_information"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let bins = self.bins;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let h = &self.hist;
        let upstream = grad_out[0] as f64;
        // dMI/dP_cd, treating the set of retained cells as fixed
        let mut row_sum = vec![0.0f64; bins];
        let mut col_sum = vec![0.0f64; bins];
        for k in 0..bins {
            for l in 0..bins {
                let p = h.joint[k * bins + l];
                if p >= MI_FLOOR {
                    row_sum[k] += p / h.pa[k];
                    col_sum[l] += p / h.pb[l];
                }
            }
        }
        let mut g = vec![0.0f64; bins * bins];
        for k in 0..bins {
            for l in 0..bins {
                let p = h.joint[k * bins + l];
                let direct = if p >= MI_FLOOR {
                    p.ln() + 1.0 - h.pa[k].ln() - h.pb[l].ln()
                } else {
                    0.0
                };
                g[k * bins + l] = upstream * (direct - row_sum[k] - col_sum[l]);
            }
        }
        vec![
            needs[0].then(|| self.pixel_grads(a, b, &g, true)),
            needs[1].then(|| self.pixel_grads(b, a, &g, false)),
        ]
    }
}

/// Mutual information of a Parzen soft-binned joint histogram.
pub fn soft_mutual_information(tape: &mut Tape, a: Var, b: Var, bins: usize) -> Result<Var> {
    same_shape(tape, a, b, "soft_mutual_information")?;
    if bins < 2 || bins > 256 {
        return Err(contract("soft_mutual_information", format!("bins {bins} outside 2..=256")));
    }
    let h = joint_histogram(tape.value(a).data(), tape.value(b).data(), bins);
    let mi = mi_from(&h, bins) as f32;
    tape.custom(&[a, b], Tensor::scalar(mi), Box::new(SoftMi { bins, hist: h }))
}

/// The per-direction similarity term, lower is better.
pub fn dissimilarity(tape: &mut Tape, target: Var, warped: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.mode {
        LossMode::Mse => mse(tape, target, warped),
        LossMode::Ssim | LossMode::SsimMi => {
            let s = ssim(tape, target, warped, cfg.ssim_window)?;
            let s = tape.scale(s, -1.0)?;
            let one_minus = tape.add_scalar(s, 1.0)?;
            if cfg.mode == LossMode::Ssim {
                return Ok(one_minus);
            }
            let mi = soft_mutual_information(tape, target, warped, cfg.mi_bins)?;
            tape.sub(one_minus, mi)
        }
    }
}

/// `mean_x ‖φ(x) − x‖²` with the squared norm summed over both channels.
pub fn identity_penalty(tape: &mut Tape, d: Var, grid: Var) -> Result<Var> {
    let m = mse(tape, d, grid)?;
    tape.scale(m, 2.0)
}

/// Tape handles for the inputs of one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelTerms {
    pub fixed: Var,
    pub moving: Var,
    pub grid: Var,
    pub forward: Var,
    /// `None` in forward-only mode.
    pub backward: Option<Var>,
}

/// Sum over levels of similarity, inverse-consistency and identity terms.
/// Without backward fields only the forward similarity and regularizer
/// remain.
pub fn total_loss(tape: &mut Tape, levels: &[LevelTerms], cfg: &LossConfig) -> Result<Var> {
    if levels.is_empty() {
        return Err(contract("total_loss", "no pyramid levels"));
    }
    let bidirectional = levels[0].backward.is_some();
    let mut terms = Vec::new();
    for (t, lv) in levels.iter().enumerate() {
        if lv.backward.is_some() != bidirectional {
            return Err(contract("total_loss", format!("level {} is missing its backward field", t + 1)));
        }
        let warped_m = warp_image(tape, lv.moving, lv.forward)?;
        terms.push(dissimilarity(tape, lv.fixed, warped_m, cfg)?);
        let reg_f = identity_penalty(tape, lv.forward, lv.grid)?;
        terms.push(tape.scale(reg_f, cfg.gamma)?);
        if let Some(bwd) = lv.backward {
            let warped_f = warp_image(tape, lv.fixed, bwd)?;
            terms.push(dissimilarity(tape, lv.moving, warped_f, cfg)?);
            let bf = compose(tape, bwd, lv.forward)?;
            let ic = mse(tape, bf, lv.grid)?;
            terms.push(tape.scale(ic, cfg.alpha)?);
            let fb = compose(tape, lv.forward, bwd)?;
            let ic = mse(tape, fb, lv.grid)?;
            terms.push(tape.scale(ic, cfg.alpha)?);
            let reg_b = identity_penalty(tape, bwd, lv.grid)?;
            terms.push(tape.scale(reg_b, cfg.gamma)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

fn eval_scalar(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&mut tape, a, b)?;
    Ok(tape.value(out).item() as f64)
}

pub fn mse_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    eval_scalar(a, b, mse)
}

pub fn ssim_value(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    eval_scalar(a, b, |t, a, b| ssim(t, a, b, window))
}

pub fn mutual_information_value(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    eval_scalar(a, b, |t, a, b| soft_mutual_information(t, a, b, bins))
}
