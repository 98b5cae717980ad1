//! Named parameter tables, their binding onto a tape, optimizers and the
//! checkpoint format.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::binio::{append_crc, put_string, verify_crc, ByteReader};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGrad(String),
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ParamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered table of named tensors. Trainable entries receive gradients;
/// the rest are buffers such as batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

/// Tape handles for every entry of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes another tape variable for one entry, e.g. to probe a
    /// single parameter group with finite differences.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Glorot-uniform initialised trainable weight.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape has no zero dims");
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Registers trainable entries as tape parameters and buffers as
    /// constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Gradients of the trainable entries after `tape.backward`; `None`
    /// for buffers and for parameters the loss did not reach.
    pub fn grads(&self, tape: &Tape, binding: &Binding) -> Vec<Option<Tensor>> {
        self.entries
            .iter()
            .zip(&binding.vars)
            .map(|(e, &v)| if e.trainable { tape.grad(v) } else { None })
            .collect()
    }

    /// Copies values for every name present in both stores; shapes must
    /// agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .index
                .get(&e.name)
                .map(|&i| &other.entries[i])
                .ok_or_else(|| ParamError::Mismatch(format!("missing parameter {:?}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(ParamError::Mismatch(format!(
                    "{:?} has shape {:?}, expected {:?}",
                    e.name,
                    src.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Optimizers
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One SGD (`p ← p − lr·g`) or Adam update over every trainable entry
/// that has a gradient. Non-finite gradients abort before anything is
/// modified.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (e, g) in store.entries.iter().zip(grads) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(ParamError::NonFiniteGrad(e.name.clone()));
            }
        }
    }
    state.step += 1;
    state.m.resize(store.entries.len(), None);
    state.v.resize(store.entries.len(), None);
    let t = state.step as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for (i, (e, g)) in store.entries.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if !e.trainable {
            continue;
        }
        let p = e.value.data_mut();
        match state.kind {
            OptimizerKind::Sgd => {
                for (pj, gj) in p.iter_mut().zip(g.data()) {
                    *pj -= lr * gj;
                }
            }
            OptimizerKind::Adam => {
                let m = state.m[i].get_or_insert_with(|| vec![0.0; p.len()]);
                let v = state.v[i].get_or_insert_with(|| vec![0.0; p.len()]);
                for j in 0..p.len() {
                    let gj = g.data()[j];
                    m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                    v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                    let mh = m[j] / c1;
                    let vh = v[j] / c2;
                    p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Checkpoints
// ----------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"MSTC";
const CKPT_VERSION: u16 = 1;

/// Serialises the store plus a free-form metadata string (the run
/// configuration). Values are stored as f64 so reloads are bit-exact.
pub fn checkpoint_bytes(store: &ParamStore, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for e in &store.entries {
        put_string(&mut out, &e.name);
        out.push(e.trainable as u8);
        out.extend_from_slice(&(e.value.rank() as u16).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    append_crc(&mut out);
    out
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(ParamStore, String)> {
    let fmt = |f: crate::binio::ReadFailure| ParamError::Format { offset: f.offset, msg: f.msg };
    let mut head = ByteReader::new(buf);
    if head.bytes(4, "magic").map_err(fmt)? != CKPT_MAGIC {
        return Err(ParamError::Format { offset: 0, msg: "bad magic, not a checkpoint".into() });
    }
    let payload = verify_crc(buf).map_err(fmt)?;
    let mut r = ByteReader::new(payload);
    r.bytes(4, "magic").map_err(fmt)?;
    let version = r.u16("version").map_err(fmt)?;
    if version != CKPT_VERSION {
        return Err(ParamError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let meta_len = r.u32("metadata length").map_err(fmt)? as usize;
    let meta_off = r.offset();
    let meta = String::from_utf8(r.bytes(meta_len, "metadata").map_err(fmt)?.to_vec())
        .map_err(|_| ParamError::Format { offset: meta_off, msg: "metadata is not UTF-8".into() })?;
    let count = r.u32("entry count").map_err(fmt)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let name = r.string("entry name").map_err(fmt)?;
        let trainable = r.u8("trainable flag").map_err(fmt)? != 0;
        let rank = r.u16("rank").map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension").map_err(fmt)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8, "tensor data").map_err(fmt)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| ParamError::Format { offset: at, msg: e.to_string() })?;
        store.add(name, t, trainable).map_err(|e| ParamError::Format { offset: at, msg: e.to_string() })?;
    }
    if r.remaining() != 0 {
        return Err(ParamError::Format { offset: r.offset(), msg: "trailing bytes after last entry".into() });
    }
    Ok((store, meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v), true).unwrap();
        s
    }

    #[test]
    fn sgd_step_by_hand() {
        let mut s = one_param(1.0);
        let mut st = OptimizerState::new(OptimizerKind::Sgd);
        optimizer_step(&mut s, &[Some(Tensor::scalar(2.0))], &mut st, 0.1).unwrap();
        assert!((s.value(ParamId(0)).item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let mut s = one_param(0.5);
        let mut st = OptimizerState::new(OptimizerKind::Adam);
        optimizer_step(&mut s, &[Some(Tensor::scalar(1.0))], &mut st, 1e-3).unwrap();
        let moved = 0.5 - s.value(ParamId(0)).item();
        assert!((moved - 1e-3 / (1.0 + ADAM_EPS)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = one_param(3.0);
            let mut st = OptimizerState::new(kind);
            optimizer_step(&mut s, &[Some(Tensor::scalar(0.0))], &mut st, 0.1).unwrap();
            assert_eq!(s.value(ParamId(0)).item(), 3.0);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = one_param(3.0);
        let mut st = OptimizerState::new(OptimizerKind::Adam);
        let r = optimizer_step(&mut s, &[Some(Tensor::scalar(f64::NAN))], &mut st, 0.1);
        assert!(matches!(r, Err(ParamError::NonFiniteGrad(_))));
        assert_eq!(s.value(ParamId(0)).item(), 3.0);
        assert_eq!(st.steps_taken(), 0);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::new();
        s.add("running", Tensor::scalar(1.0), false).unwrap();
        let mut st = OptimizerState::new(OptimizerKind::Sgd);
        optimizer_step(&mut s, &[Some(Tensor::scalar(5.0))], &mut st, 1.0).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = one_param(0.0);
        assert!(matches!(s.add("p", Tensor::scalar(1.0), true), Err(ParamError::Duplicate(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, f64::MAX, -0.0, 7.0]).unwrap(), true)
            .unwrap();
        s.add("a.bn_mean", Tensor::vector(vec![0.25]), false).unwrap();
        let bytes = checkpoint_bytes(&s, "seed = 7\n");
        let (back, meta) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(meta, "seed = 7\n");
        assert_eq!(back.len(), 2);
        for id in s.ids() {
            let a: Vec<u64> = s.value(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(s.is_trainable(id), back.is_trainable(id));
        }
    }

    #[test]
    fn checkpoint_errors_name_offsets() {
        let s = one_param(1.0);
        let mut bytes = checkpoint_bytes(&s, "");
        assert!(matches!(checkpoint_from_bytes(b"XXXXabcdefgh"), Err(ParamError::Format { offset: 0, .. })));
        let n = bytes.len();
        bytes[n - 6] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(ParamError::Format { offset, .. }) if offset == (n - 4) as u64));
    }

    #[test]
    fn load_values_checks_shapes() {
        let mut a = one_param(1.0);
        let mut b = ParamStore::new();
        b.add("p", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(a.load_values_from(&b), Err(ParamError::Mismatch(_))));
        a.load_values_from(&one_param(4.0)).unwrap();
        assert_eq!(a.value(ParamId(0)).item(), 4.0);
    }
}
