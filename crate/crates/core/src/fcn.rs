//! The velocity network: four stride-1 5×5 convolutions, ReLU after the
//! first three. Input channels are `[x, y, φx, φy]`, output is a
//! two-channel velocity at the input's resolution.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const KERNEL: usize = 5;
pub const HIDDEN: usize = 24;
pub const IN_CHANNELS: usize = 4;
pub const OUT_CHANNELS: usize = 2;
pub const LAYERS: usize = 4;

/// `(cin, cout)` of each layer.
pub const LAYER_CHANNELS: [(usize, usize); LAYERS] = [
    (IN_CHANNELS, HIDDEN),
    (HIDDEN, HIDDEN),
    (HIDDEN, HIDDEN),
    (HIDDEN, OUT_CHANNELS),
];

/// Weights and biases, stored as `[w1, b1, w2, b2, w3, b3, w4, b4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    tensors: Vec<Tensor>,
}

impl NetParams {
    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer + 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn attach(&self, tape: &mut Tape) -> NetVars {
        NetVars(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }
}

/// Tape handles for one [`NetParams`], same order as its tensors.
#[derive(Clone, Debug)]
pub struct NetVars(Vec<Var>);

impl NetVars {
    /// Wraps handles already on a tape, ordered `[w1, b1, …, w4, b4]`.
    pub fn from_vars(vars: Vec<Var>) -> Result<Self> {
        if vars.len() != 2 * LAYERS {
            return Err(contract("NetVars::from_vars", format!("expected {} handles, got {}", 2 * LAYERS, vars.len())));
        }
        Ok(Self(vars))
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// He-uniform weights `U(±sqrt(6 / fan_in))` for the hidden layers, zero
/// biases, and an all-zero output layer so the first velocity is zero.
pub fn init_params(seed: u64) -> NetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(2 * LAYERS);
    for (l, &(cin, cout)) in LAYER_CHANNELS.iter().enumerate() {
        let shape = [cout, cin, KERNEL, KERNEL];
        let weight = if l + 1 == LAYERS {
            Tensor::zeros(&shape)
        } else {
            let bound = (6.0 / (cin * KERNEL * KERNEL) as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound);
            Tensor::from_fn(&shape, |_| dist.sample(&mut rng))
        };
        tensors.push(weight);
        tensors.push(Tensor::zeros(&[cout]));
    }
    NetParams { tensors }
}

/// `f([coords; deformation])`.
pub fn fcn_forward(tape: &mut Tape, net: &NetVars, coords: Var, deformation: Var) -> Result<Var> {
    let (cc, h, w) = tape.value(coords).chw("fcn_forward")?;
    let (dc, dh, dw) = tape.value(deformation).chw("fcn_forward")?;
    if cc != 2 || dc != 2 {
        return Err(contract("fcn_forward", format!("expected 2+2 input channels, got {cc}+{dc}")));
    }
    if (h, w) != (dh, dw) {
        return Err(contract("fcn_forward", format!("coords {h}x{w} vs deformation {dh}x{dw}")));
    }
    let mut x = tape.concat_channels(&[coords, deformation])?;
    for l in 0..LAYERS {
        x = tape.conv2d(x, net.0[2 * l], net.0[2 * l + 1])?;
        if l + 1 < LAYERS {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}
