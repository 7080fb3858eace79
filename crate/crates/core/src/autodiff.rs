//! Reverse-mode automatic differentiation over dynamic-rank f64 tensors.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation evaluates
//! eagerly and records what it needs for the backward pass. Arena order is
//! a topological order by construction, so [`Tape::backward`] is a single
//! reverse sweep.

use ndarray::prelude::*;

use crate::kernels;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: usize,
    },
    Upsample {
        x: usize,
        src_h: usize,
        src_w: usize,
    },
    SoftmaxCh {
        x: usize,
    },
    LogClamp {
        x: usize,
        eps: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulConst {
        x: usize,
        m: ArrayD<f64>,
    },
    Scale {
        x: usize,
        k: f64,
    },
    AddScaled {
        a: usize,
        b: usize,
        k: f64,
    },
    Square {
        x: usize,
    },
    SumAll {
        x: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a variable that is known to participate in the loss.
    pub fn wrt(&self, v: Var) -> &ArrayD<f64> {
        self.grads[v.0]
            .as_ref()
            .expect("variable did not receive a gradient")
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

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node (shape must hold exactly one element).
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients are tracked.
    pub fn param<D: Dimension>(&mut self, value: Array<f64, D>) -> Var {
        self.push(value.into_dyn(), Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant<D: Dimension>(&mut self, value: Array<f64, D>) -> Var {
        self.push(value.into_dyn(), Op::Leaf, false)
    }

    fn as4(value: &ArrayD<f64>) -> ArrayView4<'_, f64> {
        value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected a rank-4 tensor")
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let out = {
            let iv = Self::as4(self.value(input)).to_owned();
            let wv = Self::as4(self.value(weight)).to_owned();
            let bv = self
                .value(bias)
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias must be rank 1")
                .to_owned();
            kernels::conv2d_forward(&iv, &wv, &bv, stride, pad)
        };
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x: x.0 }, needs)
    }

    pub fn upsample_bilinear(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let xv = Self::as4(self.value(x)).to_owned();
        let (_, _, src_h, src_w) = xv.dim();
        let out = kernels::upsample_bilinear(&xv, th, tw);
        let needs = self.needs(x);
        self.push(
            out.into_dyn(),
            Op::Upsample {
                x: x.0,
                src_h,
                src_w,
            },
            needs,
        )
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = Self::as4(self.value(x)).to_owned();
        let out = kernels::softmax_channels(&xv);
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::SoftmaxCh { x: x.0 }, needs)
    }

    /// Elementwise `ln(max(x, eps))`.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let out = self.value(x).mapv(|v| v.max(eps).ln());
        let needs = self.needs(x);
        self.push(out, Op::LogClamp { x: x.0, eps }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a: a.0, b: b.0 }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub { a: a.0, b: b.0 }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, needs)
    }

    /// Elementwise product with a constant tensor (masks, one-hot targets).
    pub fn mul_const(&mut self, x: Var, m: ArrayD<f64>) -> Var {
        assert_eq!(self.value(x).shape(), m.shape());
        let out = self.value(x) * &m;
        let needs = self.needs(x);
        self.push(out, Op::MulConst { x: x.0, m }, needs)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).mapv(|v| v * k);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x: x.0, k }, needs)
    }

    /// `a + k * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, k: f64) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) + &self.value(b).mapv(|v| v * k);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::AddScaled { a: a.0, b: b.0, k }, needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * v);
        let needs = self.needs(x);
        self.push(out, Op::Square { x: x.0 }, needs)
    }

    /// Sum of all elements, as a zero-rank tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::SumAll { x: x.0 },
            needs,
        )
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// only nodes reachable from `loss` that require gradients are filled.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let iv = Self::as4(&self.nodes[*input].value).to_owned();
                    let wv = Self::as4(&self.nodes[*weight].value).to_owned();
                    let gv = Self::as4(&g).to_owned();
                    let need_input = self.nodes[*input].needs_grad;
                    let (d_in, d_w, d_b) =
                        kernels::conv2d_backward(&iv, &wv, &gv, *stride, *pad, need_input);
                    if let Some(d_in) = d_in {
                        accumulate(&mut grads[*input], d_in.into_dyn());
                    }
                    if self.nodes[*weight].needs_grad {
                        accumulate(&mut grads[*weight], d_w.into_dyn());
                    }
                    if self.nodes[*bias].needs_grad {
                        accumulate(&mut grads[*bias], d_b.into_dyn());
                    }
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    dx.zip_mut_with(&self.nodes[i].value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[*x], dx);
                }
                Op::Upsample { x, src_h, src_w } => {
                    let gv = Self::as4(&g).to_owned();
                    let dx = kernels::upsample_bilinear_backward(&gv, *src_h, *src_w);
                    accumulate(&mut grads[*x], dx.into_dyn());
                }
                Op::SoftmaxCh { x } => {
                    let yv = Self::as4(&self.nodes[i].value).to_owned();
                    let gv = Self::as4(&g).to_owned();
                    let dx = kernels::softmax_channels_backward(&yv, &gv);
                    accumulate(&mut grads[*x], dx.into_dyn());
                }
                Op::LogClamp { x, eps } => {
                    let mut dx = g;
                    dx.zip_mut_with(&self.nodes[*x].value, |d, &xin| {
                        *d = if xin > *eps { *d / xin } else { 0.0 };
                    });
                    accumulate(&mut grads[*x], dx);
                }
                Op::Add { a, b } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], g.mapv(|v| -v));
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], &g * &self.nodes[*b].value);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], &g * &self.nodes[*a].value);
                    }
                }
                Op::MulConst { x, m } => {
                    accumulate(&mut grads[*x], &g * m);
                }
                Op::Scale { x, k } => {
                    accumulate(&mut grads[*x], g.mapv(|v| v * k));
                }
                Op::AddScaled { a, b, k } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        let k = *k;
                        accumulate(&mut grads[*b], g.mapv(|v| v * k));
                    }
                }
                Op::Square { x } => {
                    let dx = 2.0 * &g * &self.nodes[*x].value;
                    accumulate(&mut grads[*x], dx);
                }
                Op::SumAll { x } => {
                    let gs = g.iter().copied().next().unwrap();
                    let dx = ArrayD::from_elem(self.nodes[*x].value.shape(), gs);
                    accumulate(&mut grads[*x], dx);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
