//! Multiresolution deformation construction and the per-pair optimization
//! loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::fcn::{fcn_forward, init_params, NetParams, NetVars};
use crate::image_io::Image2D;
use crate::losses::{total_loss, LevelTerms, LossConfig, LossMode};
use crate::optim::AdamState;
use crate::pyramid::{coord_grid, gaussian_pyramid, level_extents, max_levels};
use crate::tensor::{Tape, Tensor, Var};
use crate::warp::{compose, exp_velocity, smooth_velocity, upsample_deformation, warp_image, DeformationField};

/// How each level's velocity updates the upsampled coarser deformation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateForm {
    /// `D_t = D_up ∘ exp(V_t)`
    #[default]
    Compositional,
    /// `D_t = D_up + V_t`; kept for ablation only, not diffeomorphic.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub iterations: usize,
    pub lr: f32,
    pub lambda: f32,
    /// Overrides the derived `1 / K`.
    pub alpha: Option<f32>,
    /// Overrides the derived `λ / K`.
    pub gamma: Option<f32>,
    pub loss: LossMode,
    /// Velocity smoothing in pixels at every level.
    pub sigma: f32,
    pub bidirectional: bool,
    pub seed: u64,
    pub mi_bins: usize,
    pub ssim_window: usize,
    pub update: UpdateForm,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            iterations: 800,
            lr: 5e-4,
            lambda: 5.0,
            alpha: None,
            gamma: None,
            loss: LossMode::SsimMi,
            sigma: 1.0,
            bidirectional: true,
            seed: 0,
            mi_bins: 16,
            ssim_window: 11,
            update: UpdateForm::Compositional,
        }
    }
}

impl RegistrationConfig {
    pub fn alpha(&self) -> f32 {
        self.alpha.unwrap_or(1.0 / self.levels as f32)
    }

    pub fn gamma(&self) -> f32 {
        self.gamma.unwrap_or(self.lambda / self.levels as f32)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.loss,
            alpha: self.alpha(),
            gamma: self.gamma(),
            mi_bins: self.mi_bins,
            ssim_window: self.ssim_window,
        }
    }

    /// Checks the configuration on its own and against image extents.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be non-negative", self.sigma)));
        }
        self.loss_config().validate()?;
        let feasible = max_levels(height, width);
        if self.levels > feasible {
            return Err(Error::Config(format!(
                "{} pyramid levels requested for a {width}x{height} image; the maximum feasible is {feasible}",
                self.levels
            )));
        }
        if self.loss.uses_ssim() {
            let &(ch, cw) = level_extents(height, width, self.levels).last().unwrap();
            if ch.min(cw) < self.ssim_window {
                return Err(Error::Config(format!(
                    "coarsest level {cw}x{ch} is smaller than the {0}x{0} SSIM window; use fewer levels",
                    self.ssim_window
                )));
            }
        }
        Ok(())
    }
}

/// Per-level fields, finest first.
#[derive(Clone, Debug)]
pub struct MultiresFields {
    pub forward: Vec<Var>,
    pub backward: Option<Vec<Var>>,
}

fn build_direction(tape: &mut Tape, net: &NetVars, grids: &[Var], sign: f32, cfg: &RegistrationConfig) -> Result<Vec<Var>> {
    let k = grids.len();
    let mut fields: Vec<Var> = Vec::with_capacity(k);
    for t in (0..k).rev() {
        let grid = grids[t];
        let (_, h, w) = tape.value(grid).chw("build_multires_deformations")?;
        let coords = if sign < 0.0 { tape.scale(grid, -1.0)? } else { grid };
        let upsampled = match fields.last() {
            Some(&coarser) => Some(upsample_deformation(tape, coarser, h, w)?),
            None => None,
        };
        let net_input = match upsampled {
            Some(d) => d,
            None => tape.constant(Tensor::zeros(&[1, 2, h, w])),
        };
        let v = fcn_forward(tape, net, coords, net_input)?;
        let v = smooth_velocity(tape, v, cfg.sigma)?;
        let d = match (cfg.update, upsampled) {
            (UpdateForm::Compositional, None) => exp_velocity(tape, v)?,
            (UpdateForm::Compositional, Some(up)) => {
                let step = exp_velocity(tape, v)?;
                compose(tape, up, step)?
            }
            (UpdateForm::Additive, None) => tape.add(grid, v)?,
            (UpdateForm::Additive, Some(up)) => tape.add(up, v)?,
        };
        fields.push(d);
    }
    fields.reverse();
    Ok(fields)
}

/// Coarse-to-fine construction of the forward fields (network input
/// `[X; D]`) and, when bidirectional, the backward fields (`[−X; D]`).
/// `grids` are ordered finest first.
pub fn build_multires_deformations(
    tape: &mut Tape,
    net: &NetVars,
    grids: &[Var],
    cfg: &RegistrationConfig,
) -> Result<MultiresFields> {
    if grids.is_empty() {
        return Err(contract("build_multires_deformations", "no levels"));
    }
    let forward = build_direction(tape, net, grids, 1.0, cfg)?;
    let backward = if cfg.bidirectional {
        Some(build_direction(tape, net, grids, -1.0, cfg)?)
    } else {
        None
    };
    Ok(MultiresFields { forward, backward })
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Finest-level forward field: warps the moving image onto the fixed one.
    pub forward: DeformationField,
    /// Finest-level backward field; `None` in forward-only mode.
    pub backward: Option<DeformationField>,
    pub warped_moving: Image2D,
    pub warped_fixed: Option<Image2D>,
    /// Loss before each optimizer step.
    pub loss_trace: Vec<f32>,
    /// Loss of the final parameters.
    pub final_loss: f32,
    pub elapsed_seconds: f64,
    pub config: RegistrationConfig,
    pub params: NetParams,
}

struct Inputs {
    fixed: Vec<Tensor>,
    moving: Vec<Tensor>,
    grids: Vec<Tensor>,
}

struct Evaluation {
    loss: f32,
    fields: MultiresFields,
    tape: Tape,
    loss_var: Var,
    net: NetVars,
}

fn evaluate(params: &NetParams, inputs: &Inputs, cfg: &RegistrationConfig, loss_cfg: &LossConfig) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let net = params.attach(&mut tape);
    let grids: Vec<Var> = inputs.grids.iter().map(|g| tape.constant(g.clone())).collect();
    let fields = build_multires_deformations(&mut tape, &net, &grids, cfg)?;
    let mut levels = Vec::with_capacity(grids.len());
    for t in 0..grids.len() {
        levels.push(LevelTerms {
            fixed: tape.constant(inputs.fixed[t].clone()),
            moving: tape.constant(inputs.moving[t].clone()),
            grid: grids[t],
            forward: fields.forward[t],
            backward: fields.backward.as_ref().map(|b| b[t]),
        });
    }
    let loss_var = total_loss(&mut tape, &levels, loss_cfg)?;
    let loss = tape.value(loss_var).item();
    Ok(Evaluation {
        loss,
        fields,
        tape,
        loss_var,
        net,
    })
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFinite { op, detail } => Error::NonFinite {
            op,
            detail: Some(match detail {
                Some(d) => format!("{d}, iteration {it}"),
                None => format!("iteration {it}"),
            }),
        },
        other => other,
    }
}

/// Optimizes a freshly initialized network for this pair alone.
pub fn register(moving: &Image2D, fixed: &Image2D, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    let start = Instant::now();
    let (h, w) = (fixed.height(), fixed.width());
    if (moving.height(), moving.width()) != (h, w) {
        return Err(contract(
            "register",
            format!("moving {}x{} vs fixed {w}x{h}", moving.width(), moving.height()),
        ));
    }
    cfg.validate(h, w)?;
    let loss_cfg = cfg.loss_config();
    let fixed_pyr = gaussian_pyramid(fixed, cfg.levels)?;
    let moving_pyr = gaussian_pyramid(moving, cfg.levels)?;
    let inputs = Inputs {
        fixed: fixed_pyr.levels().iter().map(Image2D::to_tensor).collect(),
        moving: moving_pyr.levels().iter().map(Image2D::to_tensor).collect(),
        grids: level_extents(h, w, cfg.levels)
            .into_iter()
            .map(|(lh, lw)| coord_grid(lh, lw))
            .collect::<Result<_>>()?,
    };

    let mut params = init_params(cfg.seed);
    let mut adam = AdamState::new(params.tensors());
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let eval = evaluate(&params, &inputs, cfg, &loss_cfg).map_err(|e| at_iteration(e, it))?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite {
                op: "total_loss",
                detail: Some(format!("iteration {it}")),
            });
        }
        loss_trace.push(eval.loss);
        let vars = eval.net.vars().to_vec();
        let mut grads = eval.tape.backward(eval.loss_var).map_err(|e| at_iteration(e, it))?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
        adam.step(params.tensors_mut(), &grads, cfg.lr).map_err(|e| at_iteration(e, it))?;
    }

    let last = evaluate(&params, &inputs, cfg, &loss_cfg).map_err(|e| at_iteration(e, cfg.iterations))?;
    let tape = &last.tape;
    let forward = DeformationField::from_tensor(tape.value(last.fields.forward[0]).clone())?;
    let backward = match &last.fields.backward {
        Some(b) => Some(DeformationField::from_tensor(tape.value(b[0]).clone())?),
        None => None,
    };
    let warped_moving = warp_value(moving, &forward)?;
    let warped_fixed = backward.as_ref().map(|b| warp_value(fixed, b)).transpose()?;
    Ok(RegistrationResult {
        forward,
        backward,
        warped_moving,
        warped_fixed,
        loss_trace,
        final_loss: last.loss,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        params,
    })
}

fn warp_value(image: &Image2D, d: &DeformationField) -> Result<Image2D> {
    let mut tape = Tape::new();
    let i = tape.constant(image.to_tensor());
    let f = tape.constant(d.tensor().clone());
    let out = warp_image(&mut tape, i, f)?;
    Image2D::from_tensor(tape.value(out))
}
