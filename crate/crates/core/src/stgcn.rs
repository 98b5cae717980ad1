//! Attention-modulated spatial-temporal graph convolution and the full
//! two-view model.
//!
//! Window activations use the layout `[B, T, N, C]`: batch, temporal
//! step (epoch within the window), node (channel) and feature channel.

use rand::Rng;
use thiserror::Error;

use crate::domain::{domain_classifier, label_predictor, DenseHead, DomainError, DomainRouting};
use crate::features::{FeatureError, FeatureNet, FeatureNetConfig};
use crate::graph::{
    cheb_polys_var, graph_learning_loss, learn_fc_adjacency, scaled_laplacian_var, AdjacencyKind, AdjacencyMatrix,
    GraphError,
};
use crate::params::{Binding, ParamError, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{Mode, NUM_STAGES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("invalid model parameter: {0}")]
    Param(String),
    #[error("window has {got} epochs, expected 2d+1 = {expected}")]
    Context { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Store(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn dim_err<T>(op: &'static str, msg: String) -> Result<T> {
    Err(ModelError::Dimension { op, msg })
}

fn dims4(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match tape.shape(x) {
        [b, t, n, c] => Ok([*b, *t, *n, *c]),
        s => dim_err(op, format!("expected [B, T, N, C], got {s:?}")),
    }
}

fn expect_shape(tape: &Tape, v: Var, want: &[usize], op: &'static str, what: &str) -> Result<()> {
    if tape.shape(v) != want {
        return dim_err(op, format!("{what} has shape {:?}, expected {want:?}", tape.shape(v)));
    }
    Ok(())
}

/// Temporal attention parameters: `V_q`, `b_q` (`T×T`), `M_1` (`N`),
/// `M_2` (`C×N`), `M_3` (`C`).
#[derive(Debug, Clone, Copy)]
pub struct TemporalAttnVars {
    pub v: Var,
    pub b: Var,
    pub m1: Var,
    pub m2: Var,
    pub m3: Var,
}

/// Spatial attention parameters: `V_p`, `b_p` (`N×N`), `Z_1` (`T`),
/// `Z_2` (`C×T`), `Z_3` (`C`).
#[derive(Debug, Clone, Copy)]
pub struct SpatialAttnVars {
    pub v: Var,
    pub b: Var,
    pub z1: Var,
    pub z2: Var,
    pub z3: Var,
}

/// `V · sigmoid(S + b)` followed by a row softmax, batched over `S`.
fn gate(tape: &mut Tape, s: Var, v: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    let bb = tape.broadcast_to(b, &shape)?;
    let z = tape.add(s, bb)?;
    let z = tape.sigmoid(z);
    let z = tape.bmm(v, z, false, false)?;
    Ok(tape.softmax_rows(z))
}

/// Temporal attention `Q' = softmax_rows(V_q · σ((X M_1) M_2 (M_3 X)ᵀ + b_q))`
/// for `x: [B, T, N, C]`, returning `[B, T, T]`.
pub fn temporal_attention(tape: &mut Tape, x: Var, p: &TemporalAttnVars) -> Result<Var> {
    const OP: &str = "temporal_attention";
    let [b, t, n, c] = dims4(tape, x, OP)?;
    expect_shape(tape, p.v, &[t, t], OP, "V_q")?;
    expect_shape(tape, p.b, &[t, t], OP, "b_q")?;
    expect_shape(tape, p.m1, &[n], OP, "M_1")?;
    expect_shape(tape, p.m2, &[c, n], OP, "M_2")?;
    expect_shape(tape, p.m3, &[c], OP, "M_3")?;
    let xp = tape.permute(x, &[0, 1, 3, 2])?;
    let xp = tape.reshape(xp, &[b * t * c, n])?;
    let m1 = tape.reshape(p.m1, &[n, 1])?;
    let lhs = tape.matmul(xp, m1)?;
    let lhs = tape.reshape(lhs, &[b * t, c])?;
    let lhs = tape.matmul(lhs, p.m2)?;
    let lhs = tape.reshape(lhs, &[b, t, n])?;
    let xf = tape.reshape(x, &[b * t * n, c])?;
    let m3 = tape.reshape(p.m3, &[c, 1])?;
    let rhs = tape.matmul(xf, m3)?;
    let rhs = tape.reshape(rhs, &[b, t, n])?;
    let s = tape.bmm(lhs, rhs, false, true)?;
    gate(tape, s, p.v, p.b)
}

/// Mixes the temporal axis: `X̂[t] = Σ_u Q'[u, t] · X[u]`.
pub fn apply_temporal_attention(tape: &mut Tape, x: Var, q: Var) -> Result<Var> {
    const OP: &str = "apply_temporal_attention";
    let [b, t, n, c] = dims4(tape, x, OP)?;
    expect_shape(tape, q, &[b, t, t], OP, "Q'")?;
    let xf = tape.reshape(x, &[b, t, n * c])?;
    let mixed = tape.bmm(q, xf, true, false)?;
    Ok(tape.reshape(mixed, &[b, t, n, c])?)
}

/// Computes `Q'` and returns `(X̂, Q')`.
pub fn temporal_attention_apply(tape: &mut Tape, x: Var, p: &TemporalAttnVars) -> Result<(Var, Var)> {
    let q = temporal_attention(tape, x, p)?;
    Ok((apply_temporal_attention(tape, x, q)?, q))
}

/// Spatial attention `P' = softmax_rows(V_p · σ((X Z_1) Z_2 (Z_3 X)ᵀ + b_p))`
/// for `x: [B, T, N, C]`, returning `[B, N, N]`.
pub fn spatial_attention(tape: &mut Tape, x: Var, p: &SpatialAttnVars) -> Result<Var> {
    const OP: &str = "spatial_attention";
    let [b, t, n, c] = dims4(tape, x, OP)?;
    expect_shape(tape, p.v, &[n, n], OP, "V_p")?;
    expect_shape(tape, p.b, &[n, n], OP, "b_p")?;
    expect_shape(tape, p.z1, &[t], OP, "Z_1")?;
    expect_shape(tape, p.z2, &[c, t], OP, "Z_2")?;
    expect_shape(tape, p.z3, &[c], OP, "Z_3")?;
    let xp = tape.permute(x, &[0, 2, 3, 1])?;
    let xp = tape.reshape(xp, &[b * n * c, t])?;
    let z1 = tape.reshape(p.z1, &[t, 1])?;
    let lhs = tape.matmul(xp, z1)?;
    let lhs = tape.reshape(lhs, &[b * n, c])?;
    let lhs = tape.matmul(lhs, p.z2)?;
    let lhs = tape.reshape(lhs, &[b, n, t])?;
    let xf = tape.reshape(x, &[b * t * n, c])?;
    let z3 = tape.reshape(p.z3, &[c, 1])?;
    let rhs = tape.matmul(xf, z3)?;
    let rhs = tape.reshape(rhs, &[b, t, n])?;
    let s = tape.bmm(lhs, rhs, false, false)?;
    gate(tape, s, p.v, p.b)
}

/// Attention-modulated Chebyshev graph convolution. For every window
/// and temporal step: `out = Σ_k (T_k ⊙ P') · X̂ · Θ_k`.
///
/// `x: [B, T, N, C]`, `stack: [B, T, K, N, N]`, `theta: [K, C, C_out]`,
/// `p: [B, N, N]`; returns `[B, T, N, C_out]`.
pub fn cheb_graph_conv(tape: &mut Tape, x: Var, stack: Var, theta: Var, p: Var) -> Result<Var> {
    const OP: &str = "cheb_graph_conv";
    let [b, t, n, c] = dims4(tape, x, OP)?;
    let k = match tape.shape(stack) {
        [sb, st, k, sn, sm] if *sb == b && *st == t && *sn == n && *sm == n => *k,
        s => return dim_err(OP, format!("stack has shape {s:?}, expected [{b}, {t}, K, {n}, {n}]")),
    };
    let c_out = match tape.shape(theta) {
        [tk, tc, co] if *tk == k && *tc == c => *co,
        [tk, ..] if *tk != k => {
            return Err(ModelError::Param(format!("Θ has {tk} Chebyshev terms, stack has {k}")))
        }
        s => return dim_err(OP, format!("Θ has shape {s:?}, expected [{k}, {c}, C_out]")),
    };
    expect_shape(tape, p, &[b, n, n], OP, "P'")?;
    let pr = tape.reshape(p, &[b, 1, 1, n, n])?;
    let pb = tape.broadcast_to(pr, &[b, t, k, n, n])?;
    let m = tape.mul(stack, pb)?;
    let m = tape.reshape(m, &[b * t, k * n, n])?;
    let xf = tape.reshape(x, &[b * t, n, c])?;
    let y = tape.bmm(m, xf, false, false)?;
    let y = tape.reshape(y, &[b * t, k, n, c])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    let y = tape.reshape(y, &[b * t * n, k * c])?;
    let th = tape.reshape(theta, &[k * c, c_out])?;
    let out = tape.matmul(y, th)?;
    Ok(tape.reshape(out, &[b, t, n, c_out])?)
}

/// `ReLU(Φ * ReLU(x))`: a `1 × κ` convolution along time with
/// length-preserving zero padding and full channel mixing.
///
/// `x: [B, T, N, C]`, `phi: [κ·C, C_out]` (row `j·C + c`), optional
/// bias `[C_out]`.
pub fn temporal_conv(tape: &mut Tape, x: Var, phi: Var, bias: Option<Var>, kappa: usize) -> Result<Var> {
    const OP: &str = "temporal_conv";
    let [b, t, n, c] = dims4(tape, x, OP)?;
    if kappa == 0 || kappa > t {
        return Err(ModelError::Param(format!("time kernel {kappa} must be in 1..={t}")));
    }
    let c_out = match tape.shape(phi) {
        [r, co] if *r == kappa * c => *co,
        s => return dim_err(OP, format!("Φ has shape {s:?}, expected [{}, C_out]", kappa * c)),
    };
    let h = tape.relu(x);
    let h = tape.permute(h, &[0, 2, 1, 3])?;
    let h = tape.reshape(h, &[b * n, t, c])?;
    let left = (kappa - 1) / 2;
    let h = tape.conv1d(h, phi, bias, kappa, 1, left, kappa - 1 - left)?;
    let h = tape.reshape(h, &[b, n, t, c_out])?;
    let h = tape.permute(h, &[0, 2, 1, 3])?;
    Ok(tape.relu(h))
}

/// Channel-axis concatenation of the two views, functional view first.
pub fn fuse_views(tape: &mut Tape, fc: Var, dc: Var) -> Result<Var> {
    const OP: &str = "fuse_views";
    let a = dims4(tape, fc, OP)?;
    let d = dims4(tape, dc, OP)?;
    if a[..3] != d[..3] {
        return dim_err(OP, format!("views disagree on [B, T, N]: {:?} vs {:?}", &a[..3], &d[..3]));
    }
    Ok(tape.concat(&[fc, dc], 3)?)
}

// ----------------------------------------------------------------------
// Model
// ----------------------------------------------------------------------

/// Where the functional-view adjacency comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcSource {
    Learned,
    /// A fixed baseline (`Full`, `Knn`, `Pcc`, `Plv` or `Mi`) supplied
    /// per epoch with the batch.
    Fixed(AdjacencyKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub features: FeatureNetConfig,
    /// Temporal context `d`; windows hold `2d + 1` epochs.
    pub context: usize,
    pub cheb_k: usize,
    pub layers: usize,
    pub cheb_filters: usize,
    pub time_filters: usize,
    pub time_kernel: usize,
    pub fc_source: FcSource,
    /// Sparsity weight inside the graph-learning loss.
    pub graph_lambda: f64,
    pub head_hidden: Option<usize>,
    /// Number of source domains (training subjects); 0 disables the
    /// domain head.
    pub num_domains: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureNetConfig::standard(),
            context: 2,
            cheb_k: 3,
            layers: 1,
            cheb_filters: 10,
            time_filters: 10,
            time_kernel: 3,
            fc_source: FcSource::Learned,
            graph_lambda: 1e-3,
            head_hidden: None,
            num_domains: 0,
        }
    }
}

impl ModelConfig {
    pub fn window_len(&self) -> usize {
        2 * self.context + 1
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.window_len();
        let checks = [
            (self.cheb_k >= 1, "cheb_k must be at least 1"),
            (self.layers >= 1, "layers must be at least 1"),
            (self.cheb_filters >= 1, "cheb_filters must be at least 1"),
            (self.time_filters >= 1, "time_filters must be at least 1"),
            (self.time_kernel >= 1 && self.time_kernel <= t, "time_kernel must be in 1..=2d+1"),
            (self.graph_lambda >= 0.0, "graph_lambda must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(ModelError::Param(msg.into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct TemporalAttnIds {
    v: ParamId,
    b: ParamId,
    m1: ParamId,
    m2: ParamId,
    m3: ParamId,
}

#[derive(Debug, Clone)]
struct SpatialAttnIds {
    v: ParamId,
    b: ParamId,
    z1: ParamId,
    z2: ParamId,
    z3: ParamId,
}

#[derive(Debug, Clone)]
struct StBlock {
    temporal: TemporalAttnIds,
    spatial: SpatialAttnIds,
    theta: ParamId,
    phi: ParamId,
    phi_b: ParamId,
}

/// Parameter ids of one spatial-temporal block, for inspection and
/// permutation tests.
#[derive(Debug, Clone, Copy)]
pub struct NodeTiedIds {
    pub spatial_v: ParamId,
    pub spatial_b: ParamId,
    pub temporal_m1: ParamId,
    pub temporal_m2: ParamId,
}

fn vec_param<R: Rng>(store: &mut ParamStore, name: String, len: usize, rng: &mut R) -> Result<ParamId> {
    Ok(store.add_glorot(name, &[len], len, 1, rng)?)
}

#[allow(clippy::too_many_arguments)]
fn build_block<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    n: usize,
    t: usize,
    c_in: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<StBlock> {
    let (k, co, fo, kap) = (cfg.cheb_k, cfg.cheb_filters, cfg.time_filters, cfg.time_kernel);
    let temporal = TemporalAttnIds {
        v: store.add_glorot(format!("{prefix}.tatt.v"), &[t, t], t, t, rng)?,
        b: store.add(format!("{prefix}.tatt.b"), Tensor::zeros(&[t, t]), true)?,
        m1: vec_param(store, format!("{prefix}.tatt.m1"), n, rng)?,
        m2: store.add_glorot(format!("{prefix}.tatt.m2"), &[c_in, n], c_in, n, rng)?,
        m3: vec_param(store, format!("{prefix}.tatt.m3"), c_in, rng)?,
    };
    let spatial = SpatialAttnIds {
        v: store.add_glorot(format!("{prefix}.satt.v"), &[n, n], n, n, rng)?,
        b: store.add(format!("{prefix}.satt.b"), Tensor::zeros(&[n, n]), true)?,
        z1: vec_param(store, format!("{prefix}.satt.z1"), t, rng)?,
        z2: store.add_glorot(format!("{prefix}.satt.z2"), &[c_in, t], c_in, t, rng)?,
        z3: vec_param(store, format!("{prefix}.satt.z3"), c_in, rng)?,
    };
    Ok(StBlock {
        temporal,
        spatial,
        theta: store.add_glorot(format!("{prefix}.theta"), &[k, c_in, co], k * c_in, co, rng)?,
        phi: store.add_glorot(format!("{prefix}.phi"), &[kap * co, fo], kap * co, fo, rng)?,
        phi_b: store.add(format!("{prefix}.phi_b"), Tensor::zeros(&[fo]), true)?,
    })
}

/// Input of one forward pass: the distinct raw epochs a batch needs and
/// the windows indexing into them.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `[E, N, L]` raw signals.
    pub epochs: Tensor,
    /// Per window, `2d + 1` indices into `epochs`.
    pub windows: Vec<Vec<usize>>,
    /// `[E, K, N, N]` Chebyshev stacks of a fixed functional adjacency,
    /// required when the model uses [`FcSource::Fixed`].
    pub fixed_fc: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Attach the domain head, and how; `None` skips it.
    pub domain: Option<DomainRouting>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, domain: None }
    }
}

/// Attention maps of one view, one entry per layer.
#[derive(Debug, Clone, Default)]
pub struct ViewAux {
    /// `Q'` per layer, `[B, T, T]`.
    pub temporal: Vec<Var>,
    /// `P'` per layer, `[B, N, N]`.
    pub spatial: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, 5]` stage probabilities.
    pub class_probs: Var,
    /// `[B, R_d]` domain probabilities when requested.
    pub domain_probs: Option<Var>,
    /// `[B, F]` pooled fused features feeding both heads.
    pub fused: Var,
    /// `[E, N, F_d]` node features of every epoch in the batch.
    pub node_features: Var,
    /// Graph-learning loss averaged over the batch's epochs (learned
    /// adjacency only).
    pub graph_loss: Option<Var>,
    /// `[E, N, N]` learned functional adjacency per epoch.
    pub fc_adjacency: Option<Var>,
    pub fc: ViewAux,
    pub dc: ViewAux,
}

/// The full two-view model: shared feature network, a functional view and
/// a distance view of stacked spatial-temporal blocks, fusion, pooled
/// readout, stage head and optional domain head.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    n_nodes: usize,
    features: FeatureNet,
    graph_w: ParamId,
    dc_stack: ParamId,
    fc_blocks: Vec<StBlock>,
    dc_blocks: Vec<StBlock>,
    label_head: DenseHead,
    domain_head: Option<DenseHead>,
}

impl Model {
    /// Registers all parameters in `store`. The distance-view Chebyshev
    /// stack is derived from `dc_adjacency` and kept as a buffer.
    pub fn new<R: Rng>(
        cfg: ModelConfig,
        dc_adjacency: &AdjacencyMatrix,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = dc_adjacency.n();
        let t = cfg.window_len();
        let features = FeatureNet::new(cfg.features.clone(), store, "feat", rng)?;
        let fd = features.output_dim();
        let graph_w = vec_param(store, "graph.w".into(), fd, rng)?;

        let mut tape = Tape::new();
        let a = tape.constant(dc_adjacency.weights().clone());
        let lt = scaled_laplacian_var(&mut tape, a)?;
        let lt = tape.reshape(lt, &[1, n, n])?;
        let stack = cheb_polys_var(&mut tape, lt, cfg.cheb_k)?;
        let stack = tape.value(stack).clone().reshaped(&[cfg.cheb_k, n, n])?;
        let dc_stack = store.add("dc.cheb", stack, false)?;

        let mut fc_blocks = Vec::new();
        let mut dc_blocks = Vec::new();
        let mut c_in = fd;
        for l in 0..cfg.layers {
            fc_blocks.push(build_block(store, &format!("fc.l{l}"), n, t, c_in, &cfg, rng)?);
            dc_blocks.push(build_block(store, &format!("dc.l{l}"), n, t, c_in, &cfg, rng)?);
            c_in = cfg.time_filters;
        }
        let fused = 2 * cfg.time_filters;
        let label_head = DenseHead::new(store, "head.label", fused, NUM_STAGES, cfg.head_hidden, rng)?;
        let domain_head = if cfg.num_domains > 0 {
            Some(DenseHead::new(store, "head.domain", fused, cfg.num_domains, cfg.head_hidden, rng)?)
        } else {
            None
        };
        Ok(Self { cfg, n_nodes: n, features, graph_w, dc_stack, fc_blocks, dc_blocks, label_head, domain_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn feature_net(&self) -> &FeatureNet {
        &self.features
    }

    pub fn graph_weight(&self) -> ParamId {
        self.graph_w
    }

    pub fn dc_stack(&self) -> ParamId {
        self.dc_stack
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.cfg.time_filters
    }

    /// Node-indexed parameters of every block (functional view first).
    pub fn node_tied(&self) -> Vec<NodeTiedIds> {
        self.fc_blocks
            .iter()
            .chain(&self.dc_blocks)
            .map(|b| NodeTiedIds {
                spatial_v: b.spatial.v,
                spatial_b: b.spatial.b,
                temporal_m1: b.temporal.m1,
                temporal_m2: b.temporal.m2,
            })
            .collect()
    }

    fn view_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        blocks: &[StBlock],
        x: Var,
        stack: Var,
    ) -> Result<(Var, ViewAux)> {
        let mut aux = ViewAux::default();
        let mut h = x;
        for blk in blocks {
            let ta = TemporalAttnVars {
                v: bind.get(blk.temporal.v),
                b: bind.get(blk.temporal.b),
                m1: bind.get(blk.temporal.m1),
                m2: bind.get(blk.temporal.m2),
                m3: bind.get(blk.temporal.m3),
            };
            let (xh, q) = temporal_attention_apply(tape, h, &ta)?;
            let sa = SpatialAttnVars {
                v: bind.get(blk.spatial.v),
                b: bind.get(blk.spatial.b),
                z1: bind.get(blk.spatial.z1),
                z2: bind.get(blk.spatial.z2),
                z3: bind.get(blk.spatial.z3),
            };
            let p = spatial_attention(tape, xh, &sa)?;
            let g = cheb_graph_conv(tape, xh, stack, bind.get(blk.theta), p)?;
            h = temporal_conv(tape, g, bind.get(blk.phi), Some(bind.get(blk.phi_b)), self.cfg.time_kernel)?;
            aux.temporal.push(q);
            aux.spatial.push(p);
        }
        Ok((h, aux))
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bind: &Binding,
        batch: &WindowBatch,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let (e, n, len) = match batch.epochs.shape() {
            [e, n, l] => (*e, *n, *l),
            s => return dim_err("forward", format!("epochs must be [E, N, L], got {s:?}")),
        };
        if n != self.n_nodes {
            return dim_err("forward", format!("batch has {n} channels, model has {}", self.n_nodes));
        }
        let t = self.cfg.window_len();
        let b = batch.windows.len();
        if b == 0 {
            return dim_err("forward", "batch has no windows".into());
        }
        if let Some(w) = batch.windows.iter().find(|w| w.len() != t) {
            return Err(ModelError::Context { expected: t, got: w.len() });
        }
        let flat_idx: Vec<usize> = batch.windows.iter().flatten().copied().collect();
        let (k, fd) = (self.cfg.cheb_k, self.features.output_dim());

        let signals = tape.constant(batch.epochs.clone().reshaped(&[e * n, len])?);
        let feats = self.features.forward(tape, store, bind, signals, opts.mode, rng)?;
        let feats = tape.reshape(feats, &[e, n, fd])?;

        let (fc_stack_e, graph_loss, fc_adjacency) = match self.cfg.fc_source {
            FcSource::Learned => {
                let a = learn_fc_adjacency(tape, feats, bind.get(self.graph_w))?;
                let gl = graph_learning_loss(tape, feats, a, self.cfg.graph_lambda)?;
                let lt = scaled_laplacian_var(tape, a)?;
                (cheb_polys_var(tape, lt, k)?, Some(gl), Some(a))
            }
            FcSource::Fixed(kind) => {
                let s = batch.fixed_fc.as_ref().ok_or_else(|| {
                    ModelError::Param(format!("{kind:?} adjacency selected but the batch carries no fixed stacks"))
                })?;
                if s.shape() != [e, k, n, n] {
                    return dim_err("forward", format!("fixed stacks have shape {:?}", s.shape()));
                }
                (tape.constant(s.clone()), None, None)
            }
        };
        let fc_stack = tape.gather(fc_stack_e, &flat_idx)?;
        let fc_stack = tape.reshape(fc_stack, &[b, t, k, n, n])?;
        let dc_stack = tape.broadcast_to(bind.get(self.dc_stack), &[b, t, k, n, n])?;

        let x = tape.gather(feats, &flat_idx)?;
        let x = tape.reshape(x, &[b, t, n, fd])?;
        let (fc_out, fc_aux) = self.view_forward(tape, bind, &self.fc_blocks, x, fc_stack)?;
        let (dc_out, dc_aux) = self.view_forward(tape, bind, &self.dc_blocks, x, dc_stack)?;
        let fused = fuse_views(tape, fc_out, dc_out)?;
        let c = tape.shape(fused)[3];
        let pooled = tape.reshape(fused, &[b, t * n, c])?;
        let pooled = tape.mean_axis(pooled, 1)?;

        let class_probs = label_predictor(tape, bind, &self.label_head, pooled)?;
        let domain_probs = match (opts.domain, &self.domain_head) {
            (Some(routing), Some(head)) => Some(domain_classifier(tape, bind, head, pooled, routing)?),
            (Some(_), None) => return Err(ModelError::Param("model was built without a domain head".into())),
            (None, _) => None,
        };
        Ok(ForwardOutput {
            class_probs,
            domain_probs,
            fused: pooled,
            node_features: feats,
            graph_loss,
            fc_adjacency,
            fc: fc_aux,
            dc: dc_aux,
        })
    }
}
