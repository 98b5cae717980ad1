//! Training loop, evaluation and subject-independent cross-validation.

use std::collections::{BTreeSet, HashMap};

use log::{debug, info};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{window_dataset, DataError, Dataset, Window};
use crate::domain::{total_loss, DomainError, DomainRouting, GrlConfig};
use crate::graph::{
    build_dc_adjacency, cheb_stack, full_adjacency, knn_adjacency, mi_adjacency, pcc_adjacency, plv_adjacency,
    scaled_laplacian, AdjacencyKind, AdjacencyMatrix, ElectrodeLayout, GraphError, SigmaMode, DEFAULT_MI_BINS,
};
use crate::metrics::{argmax_rows, mean_std, ConfusionMatrix, Metrics, MetricsError};
use crate::params::{optimizer_step, OptimizerKind, OptimizerState, ParamError, ParamStore};
use crate::stgcn::{FcSource, ForwardOptions, Model, ModelConfig, ModelError, WindowBatch};
use crate::{Mode, Tape, Tensor, NUM_STAGES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        epoch: usize,
        batch: usize,
        reason: String,
        /// Parameters before the failing step.
        last_good: Box<ParamStore>,
    },
    #[error("batch for subject set {train:?} carried samples of subject {subject}")]
    Leak { subject: u32, train: Vec<u32> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DataError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Architecture; `num_domains` is overwritten with the number of
    /// training subjects.
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation-loss improvement before stopping; 0
    /// disables early stopping. Only used when validation subjects exist.
    pub patience: usize,
    pub grl: GrlConfig,
    /// Weight of the graph-learning loss.
    pub mu: f64,
    pub optimizer: OptimizerKind,
    pub sigma: SigmaMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            patience: 10,
            grl: GrlConfig::default(),
            mu: 1e-4,
            optimizer: OptimizerKind::Adam,
            sigma: SigmaMode::MeanDistance,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let checks = [
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning rate must be positive"),
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.batch_size >= 1, "batch size must be at least 1"),
            (self.grl.beta >= 0.0 && self.grl.beta.is_finite(), "beta must be non-negative"),
            (self.mu >= 0.0 && self.mu.is_finite(), "mu must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(TrainError::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Mean losses and accuracy over one pass through the training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub beta: f64,
    pub class_ce: f64,
    pub domain_ce: f64,
    pub graph: f64,
    pub total: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub store: ParamStore,
    pub history: Vec<EpochStats>,
    /// Subjects whose index in this list is their domain label.
    pub domain_subjects: Vec<u32>,
    /// Every subject whose samples entered a gradient computation.
    pub gradient_subjects: BTreeSet<u32>,
}

/// Stream ids that keep the independent random draws apart.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Chebyshev stacks `[K, N, N]` of a fixed functional adjacency, one per
/// record, computed on demand.
#[derive(Debug, Default)]
pub struct FixedStackCache {
    stacks: HashMap<usize, Tensor>,
}

/// Fixed functional adjacency of one epoch computed from its raw signals.
pub fn fixed_adjacency(kind: AdjacencyKind, signals: &[Vec<f64>]) -> Result<AdjacencyMatrix> {
    let n = signals.len();
    Ok(match kind {
        AdjacencyKind::Full => full_adjacency(n)?,
        AdjacencyKind::Knn => knn_adjacency(signals, ((n - 1) / 2).max(1))?,
        AdjacencyKind::Pcc => pcc_adjacency(signals)?,
        AdjacencyKind::Plv => plv_adjacency(signals)?,
        AdjacencyKind::Mi => mi_adjacency(signals, DEFAULT_MI_BINS)?,
        other => return Err(TrainError::Config(format!("{other:?} is not a fixed functional adjacency"))),
    })
}

impl FixedStackCache {
    fn get(&mut self, ds: &Dataset, record: usize, kind: AdjacencyKind, k: usize) -> Result<&Tensor> {
        if !self.stacks.contains_key(&record) {
            let signals: Vec<Vec<f64>> = (0..ds.n_channels()).map(|c| ds.channel(record, c).collect()).collect();
            let a = fixed_adjacency(kind, &signals)?;
            let stack = cheb_stack(&scaled_laplacian(&a)?, k)?.stacked();
            self.stacks.insert(record, stack);
        }
        Ok(&self.stacks[&record])
    }
}

/// One forward batch plus the labels and sample provenance it carries.
struct Batch {
    input: WindowBatch,
    labels: Vec<usize>,
    subjects: Vec<u32>,
    /// Subject of every distinct epoch fed to the network.
    provenance: Vec<u32>,
    /// Dataset record index of every window's centre epoch.
    centres: Vec<usize>,
}

fn build_batch(
    ds: &Dataset,
    windows: &[&Window],
    model_cfg: &ModelConfig,
    cache: &mut FixedStackCache,
) -> Result<Batch> {
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut order: Vec<usize> = Vec::new();
    let mut idx = Vec::with_capacity(windows.len());
    for w in windows {
        idx.push(
            w.epochs
                .iter()
                .map(|&r| {
                    *local.entry(r).or_insert_with(|| {
                        order.push(r);
                        order.len() - 1
                    })
                })
                .collect::<Vec<_>>(),
        );
    }
    let (n, len) = (ds.n_channels(), ds.samples);
    let mut data = Vec::with_capacity(order.len() * n * len);
    for &r in &order {
        data.extend(ds.records[r].signal.iter().map(|&v| v as f64));
    }
    let epochs = Tensor::new(vec![order.len(), n, len], data).map_err(ModelError::from)?;
    let fixed_fc = match model_cfg.fc_source {
        FcSource::Learned => None,
        FcSource::Fixed(kind) => {
            let k = model_cfg.cheb_k;
            let mut all = Vec::with_capacity(order.len() * k * n * n);
            for &r in &order {
                all.extend_from_slice(cache.get(ds, r, kind, k)?.data());
            }
            Some(Tensor::new(vec![order.len(), k, n, n], all).map_err(ModelError::from)?)
        }
    };
    Ok(Batch {
        input: WindowBatch { epochs, windows: idx, fixed_fc },
        labels: windows.iter().map(|w| w.label as usize).collect(),
        subjects: windows.iter().map(|w| w.subject).collect(),
        provenance: order.iter().map(|&r| ds.records[r].subject).collect(),
        centres: windows.iter().map(|w| w.epochs[w.epochs.len() / 2]).collect(),
    })
}

/// Splits each subject's windows into contiguous segments, shuffles the
/// segments within each subject, then deals them round-robin across
/// subjects so every batch mixes domains. Contiguous segments let
/// neighbouring windows share their context epochs.
fn plan_batches<'a>(windows: &'a [Window], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a Window>> {
    let mut per_subject: Vec<(u32, Vec<&Window>)> = Vec::new();
    for w in windows {
        match per_subject.last_mut() {
            Some((s, v)) if *s == w.subject => v.push(w),
            _ => per_subject.push((w.subject, vec![w])),
        }
    }
    let seg = (batch_size / per_subject.len().clamp(1, batch_size)).max(1);
    let mut queues: Vec<Vec<Vec<&Window>>> = per_subject
        .into_iter()
        .map(|(_, v)| {
            let mut segs: Vec<Vec<&Window>> = v.chunks(seg).map(|c| c.to_vec()).collect();
            segs.shuffle(rng);
            segs
        })
        .collect();
    queues.shuffle(rng);
    let mut stream: Vec<&Window> = Vec::with_capacity(windows.len());
    while queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if let Some(s) = q.pop() {
                stream.extend(s);
            }
        }
    }
    stream.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn check_classes(ds: &Dataset, windows: &[Window]) -> Result<()> {
    let present: BTreeSet<u8> = windows.iter().map(|w| w.label).collect();
    if windows.is_empty() {
        return Err(TrainError::Data("no training windows".into()));
    }
    if present.len() < 2 {
        return Err(TrainError::Data(format!("need at least 2 classes, found {present:?}")));
    }
    if ds.n_channels() < 2 {
        return Err(TrainError::Data("need at least 2 channels to form a graph".into()));
    }
    Ok(())
}

/// Model and freshly initialised parameters for the given channels, with
/// the distance view taken from `layout`. Parameter initialisation depends
/// only on `cfg.seed`.
pub fn build_model(
    channels: &[String],
    layout: &ElectrodeLayout,
    cfg: &TrainConfig,
    num_domains: usize,
) -> Result<(Model, ParamStore)> {
    let layout = layout.subset(channels)?;
    let dc = build_dc_adjacency(&layout, cfg.sigma)?;
    let model_cfg = ModelConfig { num_domains, ..cfg.model.clone() };
    let mut store = ParamStore::new();
    let model = Model::new(model_cfg, &dc, &mut store, &mut rng_for(cfg.seed, INIT_STREAM))?;
    Ok((model, store))
}

/// Builds the model for `ds` and trains it on `train_subjects`. With
/// validation subjects, the parameters with the lowest validation loss are
/// kept and training stops after `patience` epochs without improvement.
pub fn train(
    ds: &Dataset,
    layout: &ElectrodeLayout,
    train_subjects: &[u32],
    validation_subjects: &[u32],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if ds.is_empty() || train_subjects.is_empty() {
        return Err(TrainError::Data("empty dataset".into()));
    }
    if let Some(s) = validation_subjects.iter().find(|s| train_subjects.contains(s)) {
        return Err(TrainError::Data(format!("subject {s} is in both training and validation sets")));
    }
    if ds.samples != cfg.model.features.input_len {
        return Err(TrainError::Data(format!(
            "epochs have {} samples, the feature network expects {}",
            ds.samples, cfg.model.features.input_len
        )));
    }
    let domain_subjects: Vec<u32> = train_subjects.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let windows = window_dataset(ds, &domain_subjects, cfg.model.context)?;
    check_classes(ds, &windows)?;
    let val_windows = window_dataset(ds, validation_subjects, cfg.model.context)?;

    let (model, mut store) = build_model(&ds.channels, layout, cfg, domain_subjects.len())?;

    let domain_of: HashMap<u32, usize> = domain_subjects.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut shuffle_rng = rng_for(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = rng_for(cfg.seed, DROPOUT_STREAM);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut cache = FixedStackCache::default();
    let mut history = Vec::new();
    let mut gradient_subjects = BTreeSet::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let beta = cfg.grl.scale_at(epoch);
        let (mut ce_y, mut ce_d, mut graph, mut total, mut hits, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for (bi, plan) in plan_batches(&windows, cfg.batch_size, &mut shuffle_rng).into_iter().enumerate() {
            let batch = build_batch(ds, &plan, model.config(), &mut cache)?;
            if let Some(&s) = batch.provenance.iter().find(|s| !domain_of.contains_key(s)) {
                return Err(TrainError::Leak { subject: s, train: domain_subjects.clone() });
            }
            let domains: Vec<usize> = batch.subjects.iter().map(|s| domain_of[s]).collect();

            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let opts = ForwardOptions { mode: Mode::Train, domain: Some(DomainRouting::Reversed(beta)) };
            let out = model.forward(&mut tape, &mut store, &bind, &batch.input, opts, &mut dropout_rng)?;
            let dom = out.domain_probs.map(|p| (p, domains.as_slice()));
            let parts = total_loss(&mut tape, out.class_probs, &batch.labels, dom, out.graph_loss, cfg.mu)?;
            let loss = tape.value(parts.total).item();
            if !loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: bi,
                    reason: format!("loss is {loss}"),
                    last_good: Box::new(store),
                });
            }
            tape.backward(parts.total).map_err(ModelError::from)?;
            let grads = store.grads(&tape, &bind);
            match optimizer_step(&mut store, &grads, &mut opt, cfg.learning_rate) {
                Ok(()) => {}
                Err(ParamError::NonFiniteGrad(name)) => {
                    return Err(TrainError::Divergence {
                        epoch,
                        batch: bi,
                        reason: format!("non-finite gradient for {name}"),
                        last_good: Box::new(store),
                    })
                }
                Err(e) => return Err(e.into()),
            }
            gradient_subjects.extend(batch.provenance.iter().copied());

            let b = batch.labels.len();
            let w = b as f64;
            ce_y += tape.value(parts.class_ce).item() * w;
            ce_d += parts.domain_ce.map(|v| tape.value(v).item()).unwrap_or(0.0) * w;
            graph += parts.graph.map(|v| tape.value(v).item()).unwrap_or(0.0) * w;
            total += loss * w;
            let pred = argmax_rows(tape.value(out.class_probs).data(), NUM_STAGES);
            hits += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            seen += b;
        }
        let n = seen as f64;
        let mut stats = EpochStats {
            epoch,
            beta,
            class_ce: ce_y / n,
            domain_ce: ce_d / n,
            graph: graph / n,
            total: total / n,
            train_accuracy: hits as f64 / n,
            val_loss: None,
        };
        if !val_windows.is_empty() {
            let v = predict_windows(&model, &store, ds, &val_windows, cfg.batch_size, &mut cache)?;
            let loss = v.iter().map(|p| -p.probs[p.label].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / v.len() as f64;
            stats.val_loss = Some(loss);
        }
        info!(
            "epoch {epoch}: total {:.4} ce_y {:.4} ce_d {:.4} acc {:.3}{}",
            stats.total,
            stats.class_ce,
            stats.domain_ce,
            stats.train_accuracy,
            stats.val_loss.map(|v| format!(" val {v:.4}")).unwrap_or_default()
        );
        let val = stats.val_loss;
        history.push(stats);

        if let Some(v) = val {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, store.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    debug!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, s)) = best {
        store = s;
    }
    Ok(TrainedModel { model, store, history, domain_subjects, gradient_subjects })
}

/// Per-window inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub subject: u32,
    /// Dataset index of the centre epoch.
    pub record: usize,
    pub label: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
    /// Pooled fused features.
    pub fused: Vec<f64>,
    /// `N × N` learned functional adjacency of the centre epoch.
    pub fc_adjacency: Option<Vec<f64>>,
    /// `T × T` temporal attention of the first functional-view block.
    pub temporal_attention: Vec<f64>,
    /// `N × N` spatial attention of the first functional-view block.
    pub spatial_attention: Vec<f64>,
}

fn predict_windows(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    windows: &[Window],
    batch_size: usize,
    cache: &mut FixedStackCache,
) -> Result<Vec<WindowPrediction>> {
    let mut out = Vec::with_capacity(windows.len());
    let mut scratch = store.clone();
    // evaluation mode draws no randomness
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (t, n) = (model.config().window_len(), model.n_nodes());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let batch = build_batch(ds, &refs, model.config(), cache)?;
        let mut tape = Tape::new();
        let bind = scratch.bind(&mut tape);
        let o = model.forward(&mut tape, &mut scratch, &bind, &batch.input, ForwardOptions::eval(), &mut rng)?;
        let probs = tape.value(o.class_probs).data().to_vec();
        let fused = tape.value(o.fused).data().to_vec();
        let f = fused.len() / chunk.len();
        let ta = tape.value(o.fc.temporal[0]).data().to_vec();
        let sa = tape.value(o.fc.spatial[0]).data().to_vec();
        let adj = o.fc_adjacency.map(|a| tape.value(a).data().to_vec());
        let preds = argmax_rows(&probs, NUM_STAGES);
        for (i, w) in chunk.iter().enumerate() {
            let centre_local = batch.input.windows[i][t / 2];
            out.push(WindowPrediction {
                subject: w.subject,
                record: batch.centres[i],
                label: w.label as usize,
                pred: preds[i],
                probs: probs[i * NUM_STAGES..(i + 1) * NUM_STAGES].to_vec(),
                fused: fused[i * f..(i + 1) * f].to_vec(),
                fc_adjacency: adj.as_ref().map(|a| a[centre_local * n * n..(centre_local + 1) * n * n].to_vec()),
                temporal_attention: ta[i * t * t..(i + 1) * t * t].to_vec(),
                spatial_attention: sa[i * n * n..(i + 1) * n * n].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Runs the trained model over every window of `subjects`.
pub fn predict(trained: &TrainedModel, ds: &Dataset, subjects: &[u32], batch_size: usize) -> Result<Vec<WindowPrediction>> {
    let windows = window_dataset(ds, subjects, trained.model.config().context)?;
    if windows.is_empty() {
        return Err(TrainError::Data("nothing to evaluate".into()));
    }
    predict_windows(&trained.model, &trained.store, ds, &windows, batch_size, &mut FixedStackCache::default())
}

pub fn metrics_of(preds: &[WindowPrediction]) -> Result<Metrics> {
    let truth: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.pred).collect();
    Ok(Metrics::from_predictions(&truth, &pred, NUM_STAGES)?)
}

/// Stage metrics of the trained model on the windows of `subjects`.
pub fn evaluate(trained: &TrainedModel, ds: &Dataset, subjects: &[u32], batch_size: usize) -> Result<Metrics> {
    metrics_of(&predict(trained, ds, subjects, batch_size)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// Shuffles subjects with `seed` and deals them round-robin into test groups.
pub fn fold_splits(subjects: &[u32], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let mut subjects: Vec<u32> = subjects.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if n_folds < 2 {
        return Err(TrainError::Config("cross-validation needs at least 2 folds".into()));
    }
    if n_folds > subjects.len() {
        return Err(TrainError::Config(format!("{n_folds} folds but only {} subjects", subjects.len())));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tests = vec![Vec::new(); n_folds];
    for (i, s) in subjects.iter().enumerate() {
        tests[i % n_folds].push(*s);
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(fold, mut test)| {
            test.sort_unstable();
            let mut train: Vec<u32> = subjects.iter().copied().filter(|s| !test.contains(s)).collect();
            train.sort_unstable();
            FoldSplit { fold, train, test }
        })
        .collect())
}

/// Seed of fold `fold`, derived from the master seed.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    master ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub split: FoldSplit,
    pub metrics: Metrics,
    pub trained: TrainedModel,
    pub predictions: Vec<WindowPrediction>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Metrics over the predictions of all folds together.
    pub pooled: Metrics,
    /// Mean and standard deviation over folds of accuracy, macro-F1 and kappa.
    pub accuracy: (f64, f64),
    pub macro_f1: (f64, f64),
    pub kappa: (f64, f64),
}

/// Subject-independent cross-validation. Folds run on up to `jobs` threads;
/// each fold is seeded independently, so results do not depend on `jobs`.
pub fn cross_validate(
    ds: &Dataset,
    layout: &ElectrodeLayout,
    n_folds: usize,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<CvReport> {
    let splits = fold_splits(&ds.subjects(), n_folds, cfg.seed)?;
    let run = |split: &FoldSplit| -> Result<FoldResult> {
        let fold_cfg = TrainConfig { seed: fold_seed(cfg.seed, split.fold), ..cfg.clone() };
        let trained = train(ds, layout, &split.train, &[], &fold_cfg)?;
        let predictions = predict(&trained, ds, &split.test, cfg.batch_size)?;
        let metrics = metrics_of(&predictions)?;
        info!("fold {}: test subjects {:?} accuracy {:.3}", split.fold, split.test, metrics.accuracy);
        Ok(FoldResult { split: split.clone(), metrics, trained, predictions })
    };
    let folds: Vec<FoldResult> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
        pool.install(|| splits.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        splits.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let mut pooled = ConfusionMatrix::new(NUM_STAGES);
    for f in &folds {
        pooled.merge(&f.metrics.confusion)?;
    }
    let stat = |g: fn(&Metrics) -> f64| mean_std(&folds.iter().map(|f| g(&f.metrics)).collect::<Vec<_>>());
    Ok(CvReport {
        pooled: Metrics::from_confusion(pooled),
        accuracy: stat(|m| m.accuracy),
        macro_f1: stat(|m| m.macro_f1),
        kappa: stat(|m| m.kappa),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(subject: u32, i: usize) -> Window {
        Window { epochs: vec![i], label: 0, subject }
    }

    #[test]
    fn batches_cover_every_window_once_and_mix_subjects() {
        let windows: Vec<Window> = (0..3).flat_map(|s| (0..20).map(move |i| win(s, s as usize * 20 + i))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = plan_batches(&windows, 12, &mut rng);
        let mut seen: Vec<usize> = plan.iter().flatten().map(|w| w.epochs[0]).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..60).collect::<Vec<_>>());
        let subjects: BTreeSet<u32> = plan[0].iter().map(|w| w.subject).collect();
        assert_eq!(subjects.len(), 3);
    }

    #[test]
    fn splits_are_disjoint_and_cover_subjects() {
        let s: Vec<u32> = (0..7).collect();
        let splits = fold_splits(&s, 3, 5).unwrap();
        let mut tested: Vec<u32> = splits.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort_unstable();
        assert_eq!(tested, s);
        for f in &splits {
            assert!(f.train.iter().all(|x| !f.test.contains(x)));
            assert_eq!(f.train.len() + f.test.len(), 7);
        }
        assert_eq!(splits, fold_splits(&s, 3, 5).unwrap());
        assert!(fold_splits(&s, 8, 5).is_err());
    }
}
