//! Two-branch 1-D CNN mapping each channel's raw epoch to a node feature
//! vector. A small-kernel branch sees fine temporal detail, a large-kernel
//! branch sees slow rhythms; their flattened outputs are concatenated
//! (small branch first). Weights are shared across channels.

use rand::Rng;
use thiserror::Error;

use crate::params::{Binding, ParamError, ParamId, ParamStore};
use crate::tensor::{window_output_len, BatchNormMode, Tape, Tensor, TensorError, Var};
use crate::Mode;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("epoch signal has {got} samples, expected {expected}")]
    SignalLength { expected: usize, got: usize },
    #[error("feature net configuration is invalid: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    pub fn valid(filters: usize, kernel: usize, stride: usize) -> Self {
        Self { filters, kernel, stride, pad_left: 0, pad_right: 0 }
    }

    /// Stride-1 convolution keeping the length: `kernel − 1` zeros split
    /// evenly, the odd one on the right.
    pub fn same(filters: usize, kernel: usize) -> Self {
        let total = kernel - 1;
        Self { filters, kernel, stride: 1, pad_left: total / 2, pad_right: total - total / 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchConfig {
    pub head: ConvSpec,
    pub pool1: (usize, usize),
    pub dropout: f64,
    pub body: Vec<ConvSpec>,
    pub pool2: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetConfig {
    pub input_len: usize,
    pub small: BranchConfig,
    pub large: BranchConfig,
}

/// Activation shape after a named stage, excluding the channel-epoch
/// batch axis: `[length, channels]` or `[features]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub shape: Vec<usize>,
}

impl FeatureNetConfig {
    /// Full-size network for 30 s epochs sampled at 100 Hz.
    pub fn standard() -> Self {
        Self {
            input_len: 3000,
            small: BranchConfig {
                head: ConvSpec::valid(32, 50, 6),
                pool1: (16, 16),
                dropout: 0.5,
                body: vec![ConvSpec::same(64, 8); 3],
                pool2: (8, 8),
            },
            large: BranchConfig {
                head: ConvSpec::valid(64, 400, 50),
                pool1: (8, 8),
                dropout: 0.0,
                body: vec![ConvSpec::same(64, 6); 3],
                pool2: (4, 4),
            },
        }
    }

    /// Miniature network (300-sample input, kernels a tenth of the
    /// standard ones, 8 output features, no dropout) for gradient checks
    /// and fast tests.
    pub fn shortened() -> Self {
        Self {
            input_len: 300,
            small: BranchConfig {
                head: ConvSpec::valid(3, 5, 6),
                pool1: (8, 8),
                dropout: 0.0,
                body: vec![ConvSpec::same(2, 3); 3],
                pool2: (3, 3),
            },
            large: BranchConfig {
                head: ConvSpec::valid(2, 40, 5),
                pool1: (8, 8),
                dropout: 0.0,
                body: vec![ConvSpec::same(2, 3); 3],
                pool2: (3, 3),
            },
        }
    }

    fn branch_shapes(&self, b: &BranchConfig, name: &str) -> Result<Vec<StageShape>> {
        let bad = |what: &str| FeatureError::Config(format!("{name} branch: {what} leaves no output"));
        let mut out = Vec::new();
        let mut len = window_output_len(self.input_len, b.head.pad_left + b.head.pad_right, b.head.kernel, b.head.stride)
            .ok_or_else(|| bad("first convolution"))?;
        out.push(StageShape { stage: format!("{name}.conv0"), shape: vec![len, b.head.filters] });
        len = window_output_len(len, 0, b.pool1.0, b.pool1.1).ok_or_else(|| bad("first pooling"))?;
        out.push(StageShape { stage: format!("{name}.pool1"), shape: vec![len, b.head.filters] });
        let mut ch = b.head.filters;
        for (i, c) in b.body.iter().enumerate() {
            len = window_output_len(len, c.pad_left + c.pad_right, c.kernel, c.stride)
                .ok_or_else(|| bad("body convolution"))?;
            ch = c.filters;
            out.push(StageShape { stage: format!("{name}.conv{}", i + 1), shape: vec![len, ch] });
        }
        len = window_output_len(len, 0, b.pool2.0, b.pool2.1).ok_or_else(|| bad("second pooling"))?;
        out.push(StageShape { stage: format!("{name}.pool2"), shape: vec![len, ch] });
        out.push(StageShape { stage: format!("{name}.flat"), shape: vec![len * ch] });
        Ok(out)
    }

    /// Every intermediate shape, computed from the configuration alone.
    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        let mut s = self.branch_shapes(&self.small, "small")?;
        let l = self.branch_shapes(&self.large, "large")?;
        let total = s.last().unwrap().shape[0] + l.last().unwrap().shape[0];
        s.extend(l);
        s.push(StageShape { stage: "concat".into(), shape: vec![total] });
        Ok(s)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.stage_shapes()?.last().unwrap().shape[0])
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: ConvSpec,
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct Branch {
    cfg: BranchConfig,
    layers: Vec<ConvLayer>,
}

/// Parameters of the feature network, registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct FeatureNet {
    cfg: FeatureNetConfig,
    small: Branch,
    large: Branch,
    out_dim: usize,
}

fn add_conv<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    spec: ConvSpec,
    in_ch: usize,
    rng: &mut R,
) -> Result<ConvLayer> {
    let fan_in = spec.kernel * in_ch;
    let c = spec.filters;
    Ok(ConvLayer {
        spec,
        w: store.add_glorot(format!("{prefix}.w"), &[fan_in, c], fan_in, c, rng)?,
        b: store.add(format!("{prefix}.b"), Tensor::zeros(&[c]), true)?,
        gamma: store.add(format!("{prefix}.bn_gamma"), Tensor::ones(&[c]), true)?,
        beta: store.add(format!("{prefix}.bn_beta"), Tensor::zeros(&[c]), true)?,
        mean: store.add(format!("{prefix}.bn_mean"), Tensor::zeros(&[c]), false)?,
        var: store.add(format!("{prefix}.bn_var"), Tensor::ones(&[c]), false)?,
    })
}

fn build_branch<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BranchConfig, rng: &mut R) -> Result<Branch> {
    let mut layers = vec![add_conv(store, &format!("{prefix}.conv0"), cfg.head, 1, rng)?];
    let mut ch = cfg.head.filters;
    for (i, spec) in cfg.body.iter().enumerate() {
        layers.push(add_conv(store, &format!("{prefix}.conv{}", i + 1), *spec, ch, rng)?);
        ch = spec.filters;
    }
    Ok(Branch { cfg: cfg.clone(), layers })
}

impl FeatureNet {
    pub fn new<R: Rng>(cfg: FeatureNetConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let out_dim = cfg.output_dim()?;
        for (name, b) in [("small", &cfg.small), ("large", &cfg.large)] {
            if !(0.0..1.0).contains(&b.dropout) {
                return Err(FeatureError::Config(format!("{name} branch dropout must be in [0, 1)")));
            }
        }
        let small = build_branch(store, &format!("{prefix}.small"), &cfg.small, rng)?;
        let large = build_branch(store, &format!("{prefix}.large"), &cfg.large, rng)?;
        Ok(Self { cfg, small, large, out_dim })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.out_dim
    }

    /// Conv → batch norm → ReLU.
    fn conv_block(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bind: &Binding,
        x: Var,
        layer: &ConvLayer,
        mode: Mode,
    ) -> Result<Var> {
        let s = layer.spec;
        let y = tape.conv1d(
            x,
            bind.get(layer.w),
            Some(bind.get(layer.b)),
            s.kernel,
            s.stride,
            s.pad_left,
            s.pad_right,
        )?;
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        };
        let mut mean = store.value(layer.mean).clone();
        let mut var = store.value(layer.var).clone();
        let y = tape.batch_norm(y, bind.get(layer.gamma), bind.get(layer.beta), &mut mean, &mut var, bn_mode)?;
        *store.value_mut(layer.mean) = mean;
        *store.value_mut(layer.var) = var;
        Ok(tape.relu(y))
    }

    #[allow(clippy::too_many_arguments)]
    fn branch_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bind: &Binding,
        x: Var,
        branch: &Branch,
        name: &str,
        mode: Mode,
        rng: &mut R,
        trace: &mut Option<&mut Vec<StageShape>>,
    ) -> Result<Var> {
        let mut record = |stage: String, tape: &Tape, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(StageShape { stage, shape: tape.shape(v)[1..].to_vec() });
            }
        };
        let mut h = self.conv_block(tape, store, bind, x, &branch.layers[0], mode)?;
        record(format!("{name}.conv0"), tape, h);
        h = tape.maxpool1d(h, branch.cfg.pool1.0, branch.cfg.pool1.1)?;
        record(format!("{name}.pool1"), tape, h);
        if branch.cfg.dropout > 0.0 {
            h = tape.dropout(h, branch.cfg.dropout, mode == Mode::Train, rng)?;
        }
        for (i, layer) in branch.layers[1..].iter().enumerate() {
            h = self.conv_block(tape, store, bind, h, layer, mode)?;
            record(format!("{name}.conv{}", i + 1), tape, h);
        }
        h = tape.maxpool1d(h, branch.cfg.pool2.0, branch.cfg.pool2.1)?;
        record(format!("{name}.pool2"), tape, h);
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1] * s[2]])?;
        record(format!("{name}.flat"), tape, flat);
        Ok(flat)
    }

    /// Features for `M` independent channel signals `x: [M, L]` → `[M, F]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bind: &Binding,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        self.forward_traced(tape, store, bind, x, mode, rng, None)
    }

    /// As [`FeatureNet::forward`], also recording every stage's
    /// per-signal activation shape.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_traced<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bind: &Binding,
        x: Var,
        mode: Mode,
        rng: &mut R,
        trace: Option<&mut Vec<StageShape>>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.cfg.input_len {
            return Err(FeatureError::SignalLength {
                expected: self.cfg.input_len,
                got: s.last().copied().unwrap_or(0),
            });
        }
        let mut trace = trace;
        let x3 = tape.reshape(x, &[s[0], s[1], 1])?;
        let small = self.branch_forward(tape, store, bind, x3, &self.small, "small", mode, rng, &mut trace)?;
        let large = self.branch_forward(tape, store, bind, x3, &self.large, "large", mode, rng, &mut trace)?;
        let out = tape.concat(&[small, large], 1)?;
        if let Some(t) = trace {
            t.push(StageShape { stage: "concat".into(), shape: tape.shape(out)[1..].to_vec() });
        }
        Ok(out)
    }
}

/// Node features for one epoch `[N, L]` → `[N, F]` outside a training
/// tape.
pub fn extract_features<R: Rng>(
    net: &FeatureNet,
    store: &mut ParamStore,
    epoch: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.constant(epoch.clone());
    let f = net.forward(&mut tape, store, &bind, x, mode, rng)?;
    Ok(tape.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_puts_extra_zero_on_the_right() {
        assert_eq!(ConvSpec::same(1, 8).pad_left, 3);
        assert_eq!(ConvSpec::same(1, 8).pad_right, 4);
        assert_eq!(ConvSpec::same(1, 6).pad_left, 2);
        assert_eq!(ConvSpec::same(1, 3).pad_right, 1);
    }

    #[test]
    fn shortened_network_has_eight_features() {
        assert_eq!(FeatureNetConfig::shortened().output_dim().unwrap(), 8);
        assert_eq!(FeatureNetConfig::standard().output_dim().unwrap(), 256);
    }

    #[test]
    fn too_short_input_is_a_config_error() {
        let mut c = FeatureNetConfig::shortened();
        c.input_len = 30;
        assert!(matches!(c.output_dim(), Err(FeatureError::Config(_))));
    }
}
