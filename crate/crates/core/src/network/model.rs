//! Residual encoder-decoder with a dilated context block at the bottleneck.
//!
//! Layout for encoder widths (w1, w2, w3), bottleneck width B:
//!
//! ```text
//! enc1: res(in -> w1) --pool--> enc2: res(w1 -> w2) --pool--> enc3: res(w2 -> w3) --pool-->
//! bottleneck: res(w3 -> B) -> context(B -> B)
//! dec3: up x2, 1x1x1 conv B -> w3, concat enc3, res(2*w3 -> w3)
//! dec2: up x2, 1x1x1 conv w3 -> w2, concat enc2, res(2*w2 -> w2)
//! dec1: up x2, 1x1x1 conv w2 -> w1, concat enc1, res(2*w1 -> w1)
//! head: 1x1x1 conv w1 -> out (with bias)
//! ```
//!
//! Convolutions feeding a batch norm carry no bias; all others do.

use crate::error::{Error, Result};
use crate::ops::{BnSaved, ConvSpec, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape5, Tensor5};

use super::config::ModelConfig;
use super::params::{init_from_specs, ParamKind, ParamSpec, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
}

impl ConvLayer {
    fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        ConvLayer {
            name: name.into(),
            spec,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn push_specs(&self, out: &mut Vec<ParamSpec>) {
        let s = &self.spec;
        out.push(ParamSpec {
            name: self.weight_key(),
            shape: s.weight_shape(),
            kind: ParamKind::ConvWeight {
                fan_in: s.in_channels * s.taps(),
            },
        });
        if s.has_bias {
            out.push(ParamSpec {
                name: self.bias_key(),
                shape: Shape5::new(s.out_channels, 1, 1, 1, 1),
                kind: ParamKind::ConvBias,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub name: String,
    pub channels: usize,
}

impl BnLayer {
    fn push_specs(&self, out: &mut Vec<ParamSpec>) {
        let shape = Shape5::new(self.channels, 1, 1, 1, 1);
        for (suffix, kind) in [
            ("gamma", ParamKind::BnGamma),
            ("beta", ParamKind::BnBeta),
            ("running_mean", ParamKind::BnRunningMean),
            ("running_var", ParamKind::BnRunningVar),
        ] {
            out.push(ParamSpec {
                name: format!("{}.{suffix}", self.name),
                shape,
                kind,
            });
        }
    }
}

/// Two conv-BN stages with a ReLU between them, plus an identity or
/// 1x1x1 projection shortcut, followed by a final ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv1: ConvLayer,
    pub bn1: BnLayer,
    pub conv2: ConvLayer,
    pub bn2: BnLayer,
    pub projection: Option<ConvLayer>,
}

impl ResidualBlock {
    /// Standard block; adds the projection exactly when channel counts differ.
    pub fn new(name: &str, in_c: usize, out_c: usize) -> Self {
        let proj = (in_c != out_c).then(|| ConvLayer::new(format!("{name}.proj"), ConvSpec::same(in_c, out_c, 1, 1, true)));
        Self::from_parts(name, in_c, out_c, proj).expect("projection matches channel change")
    }

    pub fn from_parts(name: &str, in_c: usize, out_c: usize, projection: Option<ConvLayer>) -> Result<Self> {
        match &projection {
            None if in_c != out_c => {
                return Err(Error::InvalidConfig(format!(
                    "residual block '{name}' maps {in_c} -> {out_c} channels without a projection"
                )))
            }
            Some(p) if p.spec.in_channels != in_c || p.spec.out_channels != out_c => {
                return Err(Error::InvalidConfig(format!(
                    "projection of '{name}' maps {} -> {}, block maps {in_c} -> {out_c}",
                    p.spec.in_channels, p.spec.out_channels
                )))
            }
            _ => {}
        }
        Ok(ResidualBlock {
            name: name.to_string(),
            in_channels: in_c,
            out_channels: out_c,
            conv1: ConvLayer::new(format!("{name}.conv1"), ConvSpec::same(in_c, out_c, 3, 1, false)),
            bn1: BnLayer {
                name: format!("{name}.bn1"),
                channels: out_c,
            },
            conv2: ConvLayer::new(format!("{name}.conv2"), ConvSpec::same(out_c, out_c, 3, 1, false)),
            bn2: BnLayer {
                name: format!("{name}.bn2"),
                channels: out_c,
            },
            projection,
        })
    }

    fn push_specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.push_specs(out);
        self.bn1.push_specs(out);
        self.conv2.push_specs(out);
        self.bn2.push_specs(out);
        if let Some(p) = &self.projection {
            p.push_specs(out);
        }
    }
}

/// Parallel dilated 3x3x3 branches, channel concat, 1x1x1 fuse, BN, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBlock {
    pub name: String,
    pub branches: Vec<ConvLayer>,
    pub fuse: ConvLayer,
    pub bn: BnLayer,
}

impl ContextBlock {
    pub fn new(name: &str, width: usize, branch_width: usize, rates: &[usize]) -> Result<Self> {
        if let Some(r) = rates.iter().find(|&&r| r == 0) {
            return Err(Error::InvalidConfig(format!("context block dilation rate {r} < 1")));
        }
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| ConvLayer::new(format!("{name}.branch{i}"), ConvSpec::same(width, branch_width, 3, r, true)))
            .collect();
        Ok(ContextBlock {
            name: name.to_string(),
            branches,
            fuse: ConvLayer::new(
                format!("{name}.fuse"),
                ConvSpec::same(rates.len() * branch_width, width, 1, 1, false),
            ),
            bn: BnLayer {
                name: format!("{name}.bn"),
                channels: width,
            },
        })
    }

    fn push_specs(&self, out: &mut Vec<ParamSpec>) {
        for b in &self.branches {
            b.push_specs(out);
        }
        self.fuse.push_specs(out);
        self.bn.push_specs(out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub name: String,
    pub up: ConvLayer,
    pub block: ResidualBlock,
}

/// Batch statistics of one normalization layer from a training forward.
#[derive(Clone, Debug)]
pub struct BnUpdate<T: Real> {
    pub layer: String,
    pub saved: BnSaved<T>,
    pub count: usize,
}

/// Vars produced by [`Network::forward`].
pub struct ForwardOutput<T: Real> {
    /// Raw (pre-sigmoid) logits, shape (n, out, d, h, w).
    pub logits: Var,
    /// Context block output, shape (n, bottleneck, d/8, h/8, w/8).
    pub bottleneck: Var,
    /// Leaf var of every trainable parameter used.
    pub param_vars: Vec<(String, Var)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ModelConfig,
    pub encoders: Vec<ResidualBlock>,
    pub bottleneck: ResidualBlock,
    pub context: ContextBlock,
    /// Deepest stage first.
    pub decoders: Vec<DecoderStage>,
    pub head: ConvLayer,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.encoder_widths;
        let bw = config.bottleneck_width;
        let mut encoders = Vec::with_capacity(3);
        let mut prev = config.in_channels;
        for (i, &wi) in w.iter().enumerate() {
            encoders.push(ResidualBlock::new(&format!("enc{}", i + 1), prev, wi));
            prev = wi;
        }
        let bottleneck = ResidualBlock::new("bottleneck", prev, bw);
        let context = ContextBlock::new("context", bw, config.context_branch_width, &config.dilation_rates)?;
        let mut decoders = Vec::with_capacity(3);
        let mut prev = bw;
        for i in (0..3).rev() {
            let name = format!("dec{}", i + 1);
            decoders.push(DecoderStage {
                up: ConvLayer::new(format!("{name}.up"), ConvSpec::same(prev, w[i], 1, 1, true)),
                block: ResidualBlock::new(&format!("{name}.res"), 2 * w[i], w[i]),
                name,
            });
            prev = w[i];
        }
        let head = ConvLayer::new("head", ConvSpec::same(w[0], config.out_channels, 1, 1, true));
        Ok(Network {
            config,
            encoders,
            bottleneck,
            context,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every stored tensor in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for e in &self.encoders {
            e.push_specs(&mut out);
        }
        self.bottleneck.push_specs(&mut out);
        self.context.push_specs(&mut out);
        for d in &self.decoders {
            d.up.push_specs(&mut out);
            d.block.push_specs(&mut out);
        }
        self.head.push_specs(&mut out);
        out
    }

    /// Trainable scalar count (conv weights, biases, BN gamma and beta).
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| s.kind.trainable())
            .map(|s| s.shape.numel())
            .sum()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        init_from_specs(&self.param_specs(), seed)
    }

    /// Confirms `params` holds every expected tensor with the expected shape.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        for spec in self.param_specs() {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::shape("parameter", (&spec.name, t.shape()), spec.shape));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, shape: Shape5) -> Result<()> {
        if shape.c != self.config.in_channels {
            return Err(Error::shape("network input channels", shape, self.config.in_channels));
        }
        for (axis, len) in [("depth", shape.d), ("height", shape.h), ("width", shape.w)] {
            if len == 0 || len % 8 != 0 {
                return Err(Error::NotDivisible { axis, len, divisor: 8 });
            }
        }
        Ok(())
    }

    /// Records the full forward pass of `input` on `tape`.
    pub fn forward<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        params: &'a ParamStore<T>,
        input: Var,
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        self.check_input(tape.shape(input))?;
        let mut ex = Exec {
            tape,
            params,
            mode,
            eps: self.config.bn_eps,
            param_vars: Vec::new(),
            bn_updates: Vec::new(),
        };
        let mut skips = Vec::with_capacity(3);
        let mut x = input;
        for (i, enc) in self.encoders.iter().enumerate() {
            let e = ex.residual(enc, x)?;
            if i > 0 {
                ex.release(x);
            }
            x = ex.tape.maxpool(e)?;
            skips.push(e);
        }
        let b = ex.residual(&self.bottleneck, x)?;
        ex.release(x);
        let bottleneck = ex.context(&self.context, b)?;
        ex.release(b);

        let mut x = bottleneck;
        for (dec, skip) in self.decoders.iter().zip(skips.into_iter().rev()) {
            let u = ex.tape.upsample(x);
            if x != bottleneck || !self.config.capture_bottleneck {
                ex.release(x);
            }
            let c = ex.conv(&dec.up, u)?;
            ex.release(u);
            let cat = ex.tape.concat(&[c, skip])?;
            ex.release(c);
            ex.release(skip);
            x = ex.residual(&dec.block, cat)?;
            ex.release(cat);
        }
        let logits = ex.conv(&self.head, x)?;
        ex.release(x);
        Ok(ForwardOutput {
            logits,
            bottleneck,
            param_vars: ex.param_vars,
            bn_updates: ex.bn_updates,
        })
    }

    /// Inference-mode logits without recording gradients.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, input: &Tensor5<T>) -> Result<Tensor5<T>> {
        self.check_input(input.shape())?;
        let mut tape = Tape::no_grad();
        let x = tape.leaf_ref(input);
        let out = self.forward(&mut tape, params, x, Mode::Infer)?;
        Ok(tape.take_value(out.logits).expect("logits retained"))
    }

    /// Applies the running-statistics updates of a training forward.
    pub fn apply_bn_updates<T: Real>(&self, params: &mut ParamStore<T>, updates: &[BnUpdate<T>]) -> Result<()> {
        for u in updates {
            params.update_running_stats(&u.layer, &u.saved, self.config.bn_momentum, u.count)?;
        }
        Ok(())
    }
}

/// Parameter count of the network `config` describes.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Network::new(config.clone())?.param_count())
}

struct Exec<'t, 'a, T: Real> {
    tape: &'t mut Tape<'a, T>,
    params: &'a ParamStore<T>,
    mode: Mode,
    eps: f64,
    param_vars: Vec<(String, Var)>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Exec<'_, 'a, T> {
    fn release(&mut self, v: Var) {
        self.tape.release(v);
    }

    fn param(&mut self, key: String) -> Result<Var> {
        let v = self.tape.leaf_ref(self.params.get(&key)?);
        self.param_vars.push((key, v));
        Ok(v)
    }

    fn conv(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.param(layer.weight_key())?;
        let b = if layer.spec.has_bias {
            Some(self.param(layer.bias_key())?)
        } else {
            None
        };
        let y = self.tape.conv(x, w, b, layer.spec)?;
        self.release(w);
        if let Some(b) = b {
            self.release(b);
        }
        Ok(y)
    }

    fn bn(&mut self, layer: &BnLayer, x: Var) -> Result<Var> {
        let gamma = self.param(format!("{}.gamma", layer.name))?;
        let beta = self.param(format!("{}.beta", layer.name))?;
        let y = match self.mode {
            Mode::Train => {
                let (y, saved) = self.tape.batchnorm_train(x, gamma, beta, self.eps)?;
                let s = self.tape.shape(x);
                self.bn_updates.push(BnUpdate {
                    layer: layer.name.clone(),
                    saved,
                    count: s.n * s.spatial(),
                });
                y
            }
            Mode::Infer => {
                let mean = self.params.get(&format!("{}.running_mean", layer.name));
                let var = self.params.get(&format!("{}.running_var", layer.name));
                let (Ok(mean), Ok(var)) = (mean, var) else {
                    return Err(Error::UninitializedStats(layer.name.clone()));
                };
                self.tape
                    .batchnorm_infer(x, gamma, beta, mean.data(), var.data(), self.eps)?
            }
        };
        self.release(gamma);
        self.release(beta);
        Ok(y)
    }

    fn conv_bn_relu(&mut self, conv: &ConvLayer, bn: &BnLayer, x: Var) -> Result<Var> {
        let c = self.conv(conv, x)?;
        let n = self.bn(bn, c)?;
        self.release(c);
        let r = self.tape.relu(n);
        self.release(n);
        Ok(r)
    }

    fn residual(&mut self, block: &ResidualBlock, x: Var) -> Result<Var> {
        let h = self.conv_bn_relu(&block.conv1, &block.bn1, x)?;
        let c2 = self.conv(&block.conv2, h)?;
        self.release(h);
        let n2 = self.bn(&block.bn2, c2)?;
        self.release(c2);
        let shortcut = match &block.projection {
            Some(p) => self.conv(p, x)?,
            None => x,
        };
        let s = self.tape.add(n2, shortcut)?;
        self.release(n2);
        if shortcut != x {
            self.release(shortcut);
        }
        let y = self.tape.relu(s);
        self.release(s);
        Ok(y)
    }

    fn context(&mut self, block: &ContextBlock, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(block.branches.len());
        for br in &block.branches {
            outs.push(self.conv(br, x)?);
        }
        let cat = self.tape.concat(&outs)?;
        for o in outs {
            self.release(o);
        }
        let y = self.conv_bn_relu(&block.fuse, &block.bn, cat)?;
        self.release(cat);
        Ok(y)
    }
}
