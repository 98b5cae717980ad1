//! Brain-graph construction.
//!
//! Two views feed the model: a functional-connectivity graph learned per
//! epoch from node features, and a fixed graph derived from electrode
//! distances. Five fixed baselines (full, k-nearest-neighbour, Pearson,
//! phase locking, mutual information) can replace the learned graph.
//!
//! Every adjacency is turned into a scaled Laplacian
//! `L̃ = (2/λ_max)(D − A) − I` (after symmetrizing `A`) and then into a
//! Chebyshev polynomial stack `T_0..T_{K−1}`.

use log::warn;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph parameter: {0}")]
    Param(String),
    #[error("invalid electrode layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdjacencyKind {
    LearnedFc,
    DistanceDc,
    Full,
    Knn,
    Pcc,
    Plv,
    Mi,
}

/// `n × n` non-negative connection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub kind: AdjacencyKind,
    weights: Tensor,
}

impl AdjacencyMatrix {
    pub fn new(kind: AdjacencyKind, weights: Tensor) -> Result<Self> {
        match weights.shape() {
            [r, c] if r == c => {}
            s => return Err(GraphError::Param(format!("adjacency must be square, got {s:?}"))),
        }
        if weights.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(GraphError::Param("adjacency weights must be finite and non-negative".into()));
        }
        Ok(Self { kind, weights })
    }

    pub fn n(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.weights.at(&[m, n])
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Channel names with 3-D electrode positions in any consistent unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeLayout {
    names: Vec<String>,
    coords: Vec<[f64; 3]>,
}

impl ElectrodeLayout {
    pub fn new(names: Vec<String>, coords: Vec<[f64; 3]>) -> Result<Self> {
        if names.len() != coords.len() {
            return Err(GraphError::Layout(format!(
                "{} names but {} coordinates",
                names.len(),
                coords.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(GraphError::Layout(format!("duplicate channel name {name:?}")));
            }
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GraphError::Layout("non-finite coordinate".into()));
        }
        Ok(Self { names, coords })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.coords[a], self.coords[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }

    /// Keeps the listed channels, in the given order.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let mut coords = Vec::with_capacity(names.len());
        for n in names {
            let i = self
                .index_of(n)
                .ok_or_else(|| GraphError::Layout(format!("channel {n:?} not in layout")))?;
            coords.push(self.coords[i]);
        }
        Self::new(names.to_vec(), coords)
    }
}

/// Bandwidth of the Gaussian distance kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    /// Mean distance over all distinct electrode pairs.
    MeanDistance,
    Explicit(f64),
}

/// Distance-view adjacency `A_mn = exp(−d(m,n)² / 2σ²)` with a zero
/// diagonal.
pub fn build_dc_adjacency(layout: &ElectrodeLayout, sigma: SigmaMode) -> Result<AdjacencyMatrix> {
    let n = layout.len();
    if n < 2 {
        return Err(GraphError::Layout(format!("need at least 2 electrodes, got {n}")));
    }
    let sigma = match sigma {
        SigmaMode::Explicit(s) if s > 0.0 && s.is_finite() => s,
        SigmaMode::Explicit(s) => return Err(GraphError::Param(format!("sigma must be positive, got {s}"))),
        SigmaMode::MeanDistance => {
            let mut total = 0.0;
            for a in 0..n {
                for b in a + 1..n {
                    total += layout.distance(a, b);
                }
            }
            let mean = total / (n * (n - 1) / 2) as f64;
            if mean > 0.0 {
                mean
            } else {
                warn!("degenerate electrode layout: all {n} electrodes coincide");
                1.0
            }
        }
    };
    let mut w = Tensor::zeros(&[n, n]);
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let d = layout.distance(a, b);
                w.data_mut()[a * n + b] = (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    AdjacencyMatrix::new(AdjacencyKind::DistanceDc, w)
}

// ----------------------------------------------------------------------
// Learned functional connectivity
// ----------------------------------------------------------------------

/// `x_m − x_n` for every node pair: `[B, N, F]` → `[B, N, N, F]`.
fn pairwise_diff(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, f) = (s[0], s[1], s[2]);
    let xi = tape.reshape(x, &[b, n, 1, f])?;
    let xi = tape.broadcast_to(xi, &[b, n, n, f])?;
    let xj = tape.reshape(x, &[b, 1, n, f])?;
    let xj = tape.broadcast_to(xj, &[b, n, n, f])?;
    Ok(tape.sub(xi, xj)?)
}

fn as_batched(tape: &mut Tape, x: Var, op: &str) -> Result<(Var, bool)> {
    match tape.shape(x).to_vec().as_slice() {
        [n, f] => Ok((tape.reshape(x, &[1, *n, *f])?, false)),
        [_, _, _] => Ok((x, true)),
        s => Err(GraphError::Param(format!("{op}: expected [N, F] or [B, N, F], got {s:?}"))),
    }
}

/// Learned adjacency `A_mn = softmax_n(ReLU(wᵀ|x_m − x_n|))` for node
/// features `x` (`[N, F]` or batched `[B, N, F]`) and weight vector `w`
/// (`[F]`). Rows sum to one; gradients reach both `x` and `w`.
pub fn learn_fc_adjacency(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let (xb, batched) = as_batched(tape, x, "learn_fc_adjacency")?;
    let s = tape.shape(xb).to_vec();
    let (b, n, f) = (s[0], s[1], s[2]);
    if tape.shape(w) != [f] {
        return Err(GraphError::Param(format!(
            "weight vector has shape {:?}, node features have {f} dimensions",
            tape.shape(w)
        )));
    }
    let diff = pairwise_diff(tape, xb)?;
    let ad = tape.abs(diff);
    let flat = tape.reshape(ad, &[b * n * n, f])?;
    let wc = tape.reshape(w, &[f, 1])?;
    let logits = tape.matmul(flat, wc)?;
    let logits = tape.reshape(logits, &[b, n, n])?;
    let logits = tape.relu(logits);
    let a = tape.softmax_rows(logits);
    if batched {
        Ok(a)
    } else {
        Ok(tape.reshape(a, &[n, n])?)
    }
}

/// Graph-learning regularizer
/// `Σ_{m,n} ‖x_m − x_n‖² A_mn + λ‖A‖_F²`, averaged over the batch when `x`
/// is `[B, N, F]` and `a` is `[B, N, N]`.
pub fn graph_learning_loss(tape: &mut Tape, x: Var, a: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(GraphError::Param(format!("lambda must be non-negative, got {lambda}")));
    }
    let (xb, _) = as_batched(tape, x, "graph_learning_loss")?;
    let s = tape.shape(xb).to_vec();
    let (b, n) = (s[0], s[1]);
    let ab = tape.reshape(a, &[b, n, n])?;
    let diff = pairwise_diff(tape, xb)?;
    let sq = tape.square(diff);
    let dist2 = tape.sum_axis(sq, 3)?;
    let weighted = tape.mul(dist2, ab)?;
    let smooth = tape.sum_all(weighted);
    let a2 = tape.square(ab);
    let frob = tape.sum_all(a2);
    let reg = tape.scale(frob, lambda);
    let total = tape.add(smooth, reg)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Learned adjacency for a single feature matrix, outside any training
/// tape.
pub fn learned_fc_adjacency(x: &Tensor, w: &Tensor) -> Result<AdjacencyMatrix> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let a = learn_fc_adjacency(&mut tape, xv, wv)?;
    AdjacencyMatrix::new(AdjacencyKind::LearnedFc, tape.value(a).clone())
}

// ----------------------------------------------------------------------
// Laplacian and Chebyshev polynomials
// ----------------------------------------------------------------------

/// Scaled Laplacian of `a` (`[N, N]` or `[B, N, N]`) on the tape: the
/// adjacency is symmetrized as `(A + Aᵀ)/2`, `L = D − A`, and
/// `L̃ = (2/λ_max)L − I` with `λ_max` from power iteration. Edgeless graphs
/// fall back to `λ_max = 2` with a warning.
pub fn scaled_laplacian_var(tape: &mut Tape, a: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    let (ab, batched) = match s.as_slice() {
        [r, c] if r == c => (tape.reshape(a, &[1, *r, *c])?, false),
        [_, r, c] if r == c => (a, true),
        _ => return Err(GraphError::Param(format!("adjacency must be square, got {s:?}"))),
    };
    let bs = tape.shape(ab).to_vec();
    let (b, n) = (bs[0], bs[1]);
    let at = tape.transpose_last(ab)?;
    let sum = tape.add(ab, at)?;
    let sym = tape.scale(sum, 0.5);
    let deg = tape.sum_axis(sym, 2)?;
    let deg = tape.reshape(deg, &[b, n, 1])?;
    let deg = tape.broadcast_to(deg, &[b, n, n])?;
    let eye = tape.constant(Tensor::eye(n));
    let eye_b = tape.broadcast_to(eye, &[b, n, n])?;
    let dmat = tape.mul(deg, eye_b)?;
    let lap = tape.sub(dmat, sym)?;
    let (lam, degenerate) = tape.lambda_max(lap)?;
    if !degenerate.is_empty() {
        warn!(
            "degenerate graph: {} of {b} adjacency matrices have no edges; using lambda_max = 2",
            degenerate.len()
        );
    }
    let inv = tape.recip(lam);
    let factor = tape.scale(inv, 2.0);
    let factor = tape.reshape(factor, &[b, 1, 1])?;
    let factor = tape.broadcast_to(factor, &[b, n, n])?;
    let scaled = tape.mul(lap, factor)?;
    let lt = tape.sub(scaled, eye_b)?;
    if batched {
        Ok(lt)
    } else {
        Ok(tape.reshape(lt, &[n, n])?)
    }
}

pub fn scaled_laplacian(a: &AdjacencyMatrix) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.weights().clone());
    let lt = scaled_laplacian_var(&mut tape, av)?;
    Ok(tape.value(lt).clone())
}

/// Chebyshev stack on the tape: `[B, N, N]` scaled Laplacians →
/// `[B, K, N, N]` with `T_0 = I`, `T_1 = L̃`, `T_k = 2L̃T_{k−1} − T_{k−2}`.
pub fn cheb_polys_var(tape: &mut Tape, lt: Var, k: usize) -> Result<Var> {
    if k < 1 {
        return Err(GraphError::Param("Chebyshev order K must be at least 1".into()));
    }
    let s = tape.shape(lt).to_vec();
    let (b, n) = match s.as_slice() {
        [b, r, c] if r == c => (*b, *r),
        _ => return Err(GraphError::Param(format!("expected [B, N, N], got {s:?}"))),
    };
    let eye = tape.constant(Tensor::eye(n));
    let t0 = tape.broadcast_to(eye, &[b, n, n])?;
    let mut polys = vec![t0];
    if k > 1 {
        polys.push(lt);
    }
    while polys.len() < k {
        let prev = polys[polys.len() - 1];
        let prev2 = polys[polys.len() - 2];
        let prod = tape.bmm(lt, prev, false, false)?;
        let twice = tape.scale(prod, 2.0);
        polys.push(tape.sub(twice, prev2)?);
    }
    let mut reshaped = Vec::with_capacity(k);
    for p in polys {
        reshaped.push(tape.reshape(p, &[b, 1, n, n])?);
    }
    Ok(tape.concat(&reshaped, 1)?)
}

/// `T_0(L̃) .. T_{K−1}(L̃)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebStack {
    polys: Vec<Tensor>,
}

impl ChebStack {
    pub fn k(&self) -> usize {
        self.polys.len()
    }

    pub fn polys(&self) -> &[Tensor] {
        &self.polys
    }

    /// The stack as one `[K, N, N]` tensor.
    pub fn stacked(&self) -> Tensor {
        let n = self.polys[0].shape()[0];
        let data = self.polys.iter().flat_map(|p| p.data().iter().copied()).collect();
        Tensor::new(vec![self.k(), n, n], data).expect("consistent stack")
    }
}

pub fn cheb_stack(lt: &Tensor, k: usize) -> Result<ChebStack> {
    let n = match lt.shape() {
        [r, c] if r == c => *r,
        s => return Err(GraphError::Param(format!("scaled Laplacian must be square, got {s:?}"))),
    };
    let mut tape = Tape::new();
    let v = tape.constant(lt.clone().reshaped(&[1, n, n])?);
    let stack = cheb_polys_var(&mut tape, v, k)?;
    let all = tape.value(stack).data();
    let polys = (0..k)
        .map(|i| Tensor::new(vec![n, n], all[i * n * n..(i + 1) * n * n].to_vec()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(ChebStack { polys })
}

// ----------------------------------------------------------------------
// Fixed baselines
// ----------------------------------------------------------------------

/// All-ones adjacency including self connections.
pub fn full_adjacency(n: usize) -> Result<AdjacencyMatrix> {
    if n == 0 {
        return Err(GraphError::Param("graph needs at least one node".into()));
    }
    AdjacencyMatrix::new(AdjacencyKind::Full, Tensor::ones(&[n, n]))
}

/// Binary k-nearest-neighbour graph over Euclidean feature distance; an
/// edge exists when either endpoint selects the other. Distance ties go to
/// the lower node index.
pub fn knn_adjacency(features: &[Vec<f64>], k: usize) -> Result<AdjacencyMatrix> {
    let n = features.len();
    if k == 0 || k >= n {
        return Err(GraphError::Param(format!("k must be in 1..{n}, got {k}")));
    }
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            w.data_mut()[i * n + j] = 1.0;
            w.data_mut()[j * n + i] = 1.0;
        }
    }
    AdjacencyMatrix::new(AdjacencyKind::Knn, w)
}

fn check_signals(signals: &[Vec<f64>]) -> Result<usize> {
    let len = signals.first().map(|s| s.len()).unwrap_or(0);
    if signals.len() < 2 || len < 2 || signals.iter().any(|s| s.len() != len) {
        return Err(GraphError::Param(
            "need at least two equal-length signals of at least two samples".into(),
        ));
    }
    Ok(len)
}

fn symmetric_from<F: Fn(usize, usize) -> f64>(n: usize, kind: AdjacencyKind, f: F) -> Result<AdjacencyMatrix> {
    let mut w = Tensor::zeros(&[n, n]);
    for a in 0..n {
        for b in a + 1..n {
            let v = f(a, b);
            w.data_mut()[a * n + b] = v;
            w.data_mut()[b * n + a] = v;
        }
    }
    AdjacencyMatrix::new(kind, w)
}

/// Absolute Pearson correlation; zero-variance pairs get weight 0.
pub fn pcc_adjacency(signals: &[Vec<f64>]) -> Result<AdjacencyMatrix> {
    check_signals(signals)?;
    let centered: Vec<(Vec<f64>, f64)> = signals
        .iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let c: Vec<f64> = s.iter().map(|v| v - mean).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            (c, norm)
        })
        .collect();
    symmetric_from(signals.len(), AdjacencyKind::Pcc, |a, b| {
        let ((ca, na), (cb, nb)) = (&centered[a], &centered[b]);
        if *na == 0.0 || *nb == 0.0 {
            return 0.0;
        }
        let cov: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
        (cov / (na * nb)).abs().min(1.0)
    })
}

/// Instantaneous phase of the analytic signal (FFT-based Hilbert
/// transform).
pub fn analytic_phase(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        let h = if i == 0 || (n.is_multiple_of(2) && i == n / 2) {
            1.0
        } else if i < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *c *= h;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.im.atan2(c.re)).collect()
}

/// Phase locking value `|mean(exp(i(φ_a − φ_b)))|`.
pub fn plv_adjacency(signals: &[Vec<f64>]) -> Result<AdjacencyMatrix> {
    let len = check_signals(signals)?;
    let phases: Vec<Vec<f64>> = signals.iter().map(|s| analytic_phase(s)).collect();
    symmetric_from(signals.len(), AdjacencyKind::Plv, |a, b| {
        let (mut re, mut im) = (0.0, 0.0);
        for (pa, pb) in phases[a].iter().zip(&phases[b]) {
            let d = pa - pb;
            re += d.cos();
            im += d.sin();
        }
        ((re * re + im * im).sqrt() / len as f64).min(1.0)
    })
}

pub const DEFAULT_MI_BINS: usize = 16;

fn bin_indices(signal: &[f64], bins: usize) -> Vec<usize> {
    let lo = signal.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = signal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    signal
        .iter()
        .map(|&v| {
            if width <= 0.0 {
                0
            } else {
                (((v - lo) / width) as usize).min(bins - 1)
            }
        })
        .collect()
}

/// Mutual information (nats) of two signals from `bins` equal-width bins
/// per signal.
pub fn mutual_information(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let (ia, ib) = (bin_indices(a, bins), bin_indices(b, bins));
    let n = a.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x * bins + y] += 1.0;
        pa[x] += 1.0;
        pb[y] += 1.0;
    }
    let mut mi = 0.0;
    for x in 0..bins {
        for y in 0..bins {
            let pxy = joint[x * bins + y];
            if pxy > 0.0 {
                mi += pxy / n * (pxy * n / (pa[x] * pb[y])).ln();
            }
        }
    }
    mi.max(0.0)
}

pub fn mi_adjacency(signals: &[Vec<f64>], bins: usize) -> Result<AdjacencyMatrix> {
    check_signals(signals)?;
    if bins < 2 {
        return Err(GraphError::Param(format!("need at least 2 bins, got {bins}")));
    }
    symmetric_from(signals.len(), AdjacencyKind::Mi, |a, b| {
        mutual_information(&signals[a], &signals[b], bins)
    })
}
