use super::{blur, conv, sample, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation with a hand-written backward rule, for fused kernels that
/// would be wasteful to express through the primitive ops.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Bilinear {
        image: Var,
        coords: Var,
    },
    Blur {
        input: Var,
        kernel: Vec<f32>,
    },
    Mean(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Concat(..) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::Blur { .. } => "blur",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if `var` is not a differentiable leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(contract(op, format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable leaf (a parameter or an input whose gradient
    /// is wanted).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x + c).collect())?;
        self.push(t, Op::Offset(a), &[a])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.push(t, Op::Relu(a), &[a])
    }

    /// Concatenates `[1, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat", "no inputs"))?;
        let (_, h, w) = self.value(*first).chw("concat")?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let t = self.value(p);
            let (c, ph, pw) = t.chw("concat")?;
            if (ph, pw) != (h, w) {
                return Err(contract("concat", format!("extent mismatch {ph}x{pw} vs {h}x{w}")));
            }
            channels += c;
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(&[1, channels, h, w], data)?;
        self.push(t, Op::Concat(parts.to_vec()), parts)
    }

    /// Stride-1 cross-correlation with `k×k` kernels (k odd) and `k/2` zero
    /// padding, so the output keeps the input's spatial extents.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.value(input).chw("conv2d")?;
        let (cout, wcin, k) = match self.value(weight).shape() {
            &[co, ci, kh, kw] if kh == kw && kh % 2 == 1 => (co, ci, kh),
            s => return Err(contract("conv2d", format!("weight must be [Cout, Cin, k, k] with odd k, got {s:?}"))),
        };
        if wcin != cin {
            return Err(contract("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if self.value(bias).shape() != [cout] {
            return Err(contract("conv2d", format!("bias must be [{cout}], got {:?}", self.value(bias).shape())));
        }
        let out = conv::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            cin,
            cout,
            h,
            w,
            k,
        );
        let t = Tensor::new(&[1, cout, h, w], out)?;
        self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    /// Bilinear sampling of `image` (`[1, C, H, W]`) at `coords`
    /// (`[1, 2, H', W']`, channel 0 = x, channel 1 = y, normalized to
    /// [-1, 1] with align-corners). Out-of-range coordinates clamp to the
    /// border.
    pub fn bilinear_sample(&mut self, image: Var, coords: Var) -> Result<Var> {
        let (c, h, w) = self.value(image).chw("bilinear_sample")?;
        let (cc, ho, wo) = self.value(coords).chw("bilinear_sample")?;
        if cc != 2 {
            return Err(contract("bilinear_sample", format!("coords need 2 channels, got {cc}")));
        }
        let out = sample::bilinear_forward(self.value(image).data(), c, h, w, self.value(coords).data(), ho, wo);
        let t = Tensor::new(&[1, c, ho, wo], out)?;
        self.push(t, Op::Bilinear { image, coords }, &[image, coords])
    }

    /// Separable blur of every channel with a normalized odd-length kernel
    /// and reflected borders.
    pub fn blur(&mut self, input: Var, kernel: Vec<f32>) -> Result<Var> {
        let (c, h, w) = self.value(input).chw("blur")?;
        if kernel.len() % 2 == 0 {
            return Err(contract("blur", "kernel length must be odd"));
        }
        let out = blur::blur(self.value(input).data(), c, h, w, &kernel);
        let t = Tensor::new(&[1, c, h, w], out)?;
        self.push(t, Op::Blur { input, kernel }, &[input])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(contract("mean", "empty tensor"));
        }
        let s: f64 = ta.data().iter().map(|&x| x as f64).sum();
        let t = Tensor::scalar((s / ta.len() as f64) as f32);
        self.push(t, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a])
    }

    /// Records the output of a fused operation computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from the scalar `loss`, consuming the tape.
    ///
    /// Every differentiable leaf gets an entry in the result; leaves that do
    /// not influence `loss` get zeros. A non-finite gradient aborts the sweep
    /// with the name of the operation that produced it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if nodes[loss.0].value.len() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        let mut sink = Sink {
            nodes: &nodes,
            grads: &mut grads,
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            let name = node.op.name();
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    sink.add(*a, &g, name)?;
                    sink.add(*b, &g, name)?;
                }
                Op::Sub(a, b) => {
                    sink.add(*a, &g, name)?;
                    if sink.needs(*b) {
                        sink.add_owned(*b, g.iter().map(|x| -x).collect(), name)?;
                    }
                }
                Op::Mul(a, b) => {
                    if sink.needs(*a) {
                        let gb = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                        sink.add_owned(*a, gb, name)?;
                    }
                    if sink.needs(*b) {
                        let ga = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                        sink.add_owned(*b, ga, name)?;
                    }
                }
                Op::Div(a, b) => {
                    let den = val(*b).data();
                    if sink.needs(*a) {
                        let ga = g.iter().zip(den).map(|(g, y)| g / y).collect();
                        sink.add_owned(*a, ga, name)?;
                    }
                    if sink.needs(*b) {
                        let out = node.value.data();
                        let gb = g
                            .iter()
                            .zip(out.iter().zip(den))
                            .map(|(g, (q, y))| -g * q / y)
                            .collect();
                        sink.add_owned(*b, gb, name)?;
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    sink.add_owned(*a, g.iter().map(|x| x * c).collect(), name)?;
                }
                Op::Offset(a) => sink.add(*a, &g, name)?,
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    sink.add_owned(*a, ga, name)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        sink.add(p, &g[offset..offset + n], name)?;
                        offset += n;
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let (cin, h, w) = val(*input).chw(name)?;
                    let wshape = val(*weight).shape();
                    let (cout, k) = (wshape[0], wshape[2]);
                    let (gi, gw, gb) = conv::conv2d_backward(
                        &g,
                        val(*input).data(),
                        val(*weight).data(),
                        cin,
                        cout,
                        h,
                        w,
                        k,
                        sink.needs(*input),
                    );
                    if let Some(gi) = gi {
                        sink.add_owned(*input, gi, name)?;
                    }
                    sink.add_owned(*weight, gw, name)?;
                    sink.add_owned(*bias, gb, name)?;
                }
                Op::Bilinear { image, coords } => {
                    let (c, h, w) = val(*image).chw(name)?;
                    let (_, ho, wo) = val(*coords).chw(name)?;
                    let (gi, gc) = sample::bilinear_backward(
                        &g,
                        val(*image).data(),
                        c,
                        h,
                        w,
                        val(*coords).data(),
                        ho,
                        wo,
                        sink.needs(*image),
                        sink.needs(*coords),
                    );
                    if let Some(gi) = gi {
                        sink.add_owned(*image, gi, name)?;
                    }
                    if let Some(gc) = gc {
                        sink.add_owned(*coords, gc, name)?;
                    }
                }
                Op::Blur { input, kernel } => {
                    let (c, h, w) = val(*input).chw(name)?;
                    sink.add_owned(*input, blur::blur_adjoint(&g, c, h, w, kernel), name)?;
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    sink.add_owned(*a, vec![g[0] / n as f32; n], name)?;
                }
                Op::Sum(a) => {
                    let n = val(*a).len();
                    sink.add_owned(*a, vec![g[0]; n], name)?;
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|v| sink.needs(*v)).collect();
                    let gs = op.backward(&ins, &node.value, &g, &needs);
                    for (v, gv) in inputs.iter().zip(gs) {
                        if let Some(gv) = gv {
                            sink.add_owned(*v, gv, name)?;
                        }
                    }
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Tensor::new(node.value.shape(), data).expect("gradient shape matches its leaf")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f32>>],
}

impl Sink<'_> {
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: &[f32], op: &'static str) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
        self.check(v, op)
    }

    fn add_owned(&mut self, v: Var, g: Vec<f32>, op: &'static str) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
        self.check(v, op)
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        let g = self.grads[v.0].as_ref().expect("just written");
        if g.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                op,
                detail: Some("in gradient".into()),
            })
        }
    }
}
