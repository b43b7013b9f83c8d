//! Reverse-mode autodiff over the primitive kernels in [`crate::ops`].
//!
//! A [`Tape`] records every executed op together with whatever its backward
//! pass needs. [`Tape::backward`] replays the record in reverse, visiting each
//! op once and summing gradient contributions for tensors with several
//! consumers. A tape built with [`Tape::no_grad`] keeps no contexts and lets
//! the caller release intermediates early; calling backward on it fails.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::ops::{self, BnSaved, ConvSpec};
use crate::tensor::{Real, Shape5, Tensor5};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
}

struct Node<'a, T: Real> {
    value: Option<Cow<'a, Tensor5<T>>>,
    shape: Shape5,
    op: Op<T>,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Inference-only tape.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor5<T>>, op: Op<T>) -> Var {
        let shape = value.shape();
        self.nodes.push(Node {
            value: Some(value),
            shape,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor5<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    /// Leaf that borrows its value (parameters, inputs).
    pub fn leaf_ref(&mut self, value: &'a Tensor5<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> Shape5 {
        self.nodes[v.0].shape
    }

    /// Value of `v`. Panics if the value was released.
    pub fn value(&self, v: Var) -> &Tensor5<T> {
        self.nodes[v.0]
            .value
            .as_deref()
            .unwrap_or_else(|| panic!("value of node {} was released", v.0))
    }

    pub fn take_value(&mut self, v: Var) -> Option<Tensor5<T>> {
        self.nodes[v.0].value.take().map(Cow::into_owned)
    }

    /// Drops the value of `v` when no backward pass can need it.
    pub fn release(&mut self, v: Var) {
        if !self.grad_enabled {
            self.nodes[v.0].value = None;
        }
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let b = bias.map(|b| self.value(b).data());
        let out = ops::conv3d_forward(self.value(input), self.value(weight), b, &spec)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    /// Batch norm using batch statistics; returns the saved statistics so
    /// the caller can update running estimates.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnSaved<T>)> {
        self.check_bn(input, gamma, beta)?;
        let (y, saved) = ops::bn_train_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let v = self.push(
            Cow::Owned(y),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved: saved.clone(),
            },
        );
        Ok((v, saved))
    }

    pub fn batchnorm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        self.check_bn(input, gamma, beta)?;
        let c = self.shape(input).c;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm running stats", self.shape(input), running_mean.len()));
        }
        let (y, saved) = ops::bn_infer_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        Ok(self.push(
            Cow::Owned(y),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
        ))
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.shape(input).c;
        for p in [gamma, beta] {
            if self.shape(p).numel() != c {
                return Err(Error::shape("batchnorm affine", self.shape(input), self.shape(p)));
            }
        }
        Ok(())
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(Cow::Owned(y), Op::Relu { input })
    }

    pub fn maxpool(&mut self, input: Var) -> Result<Var> {
        let p = ops::maxpool3d(self.value(input))?;
        let argmax = if self.grad_enabled { p.argmax } else { Vec::new() };
        Ok(self.push(Cow::Owned(p.output), Op::MaxPool { input, argmax }))
    }

    pub fn upsample(&mut self, input: Var) -> Var {
        let y = ops::trilinear_upsample2(self.value(input));
        self.push(Cow::Owned(y), Op::Upsample { input })
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor5<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&parts)?;
        Ok(self.push(
            Cow::Owned(y),
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Cow::Owned(y), Op::Add { a, b }))
    }

    fn saved_value(&self, v: Var, owner: usize) -> Result<&Tensor5<T>> {
        self.nodes[v.0]
            .value
            .as_deref()
            .ok_or(Error::MissingContext(owner))
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `root`) back through the tape. Gradients of leaves and of the vars in
    /// `keep` are retained in the result; all others are dropped once used.
    pub fn backward(&self, root: Var, seed: Tensor5<T>, keep: &[Var]) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::MissingContext(root.0));
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor5<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let x = self.saved_value(*input, i)?;
                    let w = self.saved_value(*weight, i)?;
                    let gi = ops::conv::conv3d_backward_input(&g, w, spec, x.shape());
                    let gw = ops::conv::conv3d_backward_weights(&g, x, spec);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *weight, gw);
                    if let Some(b) = bias {
                        let gb = ops::conv::bias_grad(&g);
                        let gb = Tensor5::from_vec(self.shape(*b), gb)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let x = self.saved_value(*input, i)?;
                    let gm = self.saved_value(*gamma, i)?;
                    let (gx, gg, gb) = ops::bn_backward(&g, x, gm.data(), saved);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, Tensor5::from_vec(self.shape(*gamma), gg)?);
                    accumulate(&mut grads, *beta, Tensor5::from_vec(self.shape(*beta), gb)?);
                }
                Op::Relu { input } => {
                    let y = node.value.as_deref().ok_or(Error::MissingContext(i))?;
                    accumulate(&mut grads, *input, ops::relu_backward(&g, y));
                }
                Op::MaxPool { input, argmax } => {
                    let gi = ops::maxpool3d_backward(&g, argmax, self.shape(*input));
                    accumulate(&mut grads, *input, gi);
                }
                Op::Upsample { input } => {
                    let gi = ops::trilinear_upsample2_backward(&g, self.shape(*input));
                    accumulate(&mut grads, *input, gi);
                }
                Op::Concat { inputs } => {
                    let chans: Vec<usize> = inputs.iter().map(|&v| self.shape(v).c).collect();
                    for (&v, part) in inputs.iter().zip(ops::split_channels(&g, &chans)?) {
                        accumulate(&mut grads, v, part);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
            }
            if keep.contains(&Var(i)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor5<T>>], v: Var, g: Tensor5<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor5<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor5<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor5<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
