//! Classifier heads, gradient-reversal routing and the combined loss.
//!
//! The stage classifier and the subject (domain) classifier share the
//! fused features. Routing the domain branch through a gradient reversal
//! layer makes the domain head minimise its cross-entropy while the
//! feature extractor is pushed to maximise it.

use rand::Rng;
use thiserror::Error;

use crate::params::{Binding, ParamError, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("head expects {expected} input features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("reversal scale must be finite and non-negative, got {0}")]
    Scale(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, DomainError>;

/// Dense softmax classifier with an optional ReLU hidden layer.
#[derive(Debug, Clone)]
pub struct DenseHead {
    hidden: Option<(ParamId, ParamId)>,
    w: ParamId,
    b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl DenseHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        hidden: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let (hidden, top_in) = match hidden {
            Some(h) => {
                let w = store.add_glorot(format!("{prefix}.hidden_w"), &[in_dim, h], in_dim, h, rng)?;
                let b = store.add(format!("{prefix}.hidden_b"), Tensor::zeros(&[h]), true)?;
                (Some((w, b)), h)
            }
            None => (None, in_dim),
        };
        let w = store.add_glorot(format!("{prefix}.w"), &[top_in, out_dim], top_in, out_dim, rng)?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[out_dim]), true)?;
        Ok(Self { hidden, w, b, in_dim, out_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    /// Row-wise class probabilities for `x: [B, in_dim]`.
    pub fn probs(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(DomainError::Dimension { expected: self.in_dim, got: s.last().copied().unwrap_or(0) });
        }
        let mut h = x;
        if let Some((w, b)) = self.hidden {
            h = tape.matmul(h, bind.get(w))?;
            h = tape.add_bias(h, bind.get(b))?;
            h = tape.relu(h);
        }
        let logits = tape.matmul(h, bind.get(self.w))?;
        let logits = tape.add_bias(logits, bind.get(self.b))?;
        Ok(tape.softmax_rows(logits))
    }
}

pub fn label_predictor(tape: &mut Tape, bind: &Binding, head: &DenseHead, features: Var) -> Result<Var> {
    head.probs(tape, bind, features)
}

/// How the domain branch is attached to the shared features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainRouting {
    /// Gradient reversal with the given scale.
    Reversed(f64),
    /// Ordinary gradient flow; used to compare against the reversed path.
    Plain,
}

pub fn domain_classifier(
    tape: &mut Tape,
    bind: &Binding,
    head: &DenseHead,
    features: Var,
    routing: DomainRouting,
) -> Result<Var> {
    let routed = match routing {
        DomainRouting::Reversed(scale) => {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(DomainError::Scale(scale));
            }
            tape.grl(features, scale)?
        }
        DomainRouting::Plain => features,
    };
    head.probs(tape, bind, routed)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes.max(1)]);
    if labels.is_empty() {
        return Err(TensorError::EmptyOutput { op: "one_hot", msg: "no labels".into() }.into());
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(DomainError::Label { label: l, classes });
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// The separate terms of the training objective and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub class_ce: Var,
    pub domain_ce: Option<Var>,
    pub graph: Option<Var>,
    pub total: Var,
}

/// `CE_y + CE_d + μ·graph_loss`. The adversarial sign lives in the GRL on
/// the domain branch, so the domain term is added as plain cross-entropy.
pub fn total_loss(
    tape: &mut Tape,
    class_probs: Var,
    labels: &[usize],
    domain: Option<(Var, &[usize])>,
    graph_loss: Option<Var>,
    mu: f64,
) -> Result<LossParts> {
    let classes = tape.shape(class_probs)[1];
    let y = tape.constant(one_hot(labels, classes)?);
    let class_ce = tape.cross_entropy(class_probs, y)?;
    let mut total = class_ce;
    let domain_ce = match domain {
        Some((probs, domains)) => {
            let r = tape.shape(probs)[1];
            let d = tape.constant(one_hot(domains, r)?);
            let ce = tape.cross_entropy(probs, d)?;
            total = tape.add(total, ce)?;
            Some(ce)
        }
        None => None,
    };
    if let Some(g) = graph_loss {
        let weighted = tape.scale(g, mu);
        total = tape.add(total, weighted)?;
    }
    Ok(LossParts { class_ce, domain_ce, graph: graph_loss, total })
}

/// Reversal strength over training: `β · min(1, epoch / warmup)` with
/// 0-based epochs; no warm-up means the full `β` from the start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlConfig {
    pub beta: f64,
    pub warmup_epochs: usize,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self { beta: 0.1, warmup_epochs: 10 }
    }
}

impl GrlConfig {
    pub fn scale_at(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            self.beta
        } else {
            self.beta * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }
}
