//! Numerical self-checks: finite-difference gradients and independent
//! oracles for the graph, attention, loss and metric code.

use std::time::Instant;

use mstgcn::data::{generate_synthetic, Dataset, SyntheticSpec};
use mstgcn::domain::{domain_classifier, label_predictor, total_loss, DenseHead, DomainRouting};
use mstgcn::features::{FeatureNet, FeatureNetConfig};
use mstgcn::graph::{
    build_dc_adjacency, cheb_polys_var, cheb_stack, graph_learning_loss, learn_fc_adjacency, scaled_laplacian,
    scaled_laplacian_var, AdjacencyKind, AdjacencyMatrix, ElectrodeLayout, SigmaMode,
};
use mstgcn::metrics::{ConfusionMatrix, Metrics};
use mstgcn::params::ParamStore;
use mstgcn::stgcn::{
    cheb_graph_conv, fuse_views, spatial_attention, temporal_attention_apply, temporal_conv, ForwardOptions, Model,
    ModelConfig, ModelError, SpatialAttnVars, TemporalAttnVars, WindowBatch,
};
use mstgcn::tensor::{grad_check, BatchNormMode};
use mstgcn::{Mode, Tape, Tensor, TensorError, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}


fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn map(t: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(shape, t.into_data().into_iter().map(f).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed non-uniform weights.
fn readout(t: &mut Tape, y: Var) -> Result<Var, TensorError> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 1.37).sin() + 0.2).collect())?;
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

type Op = Box<dyn Fn(&mut Tape, Var) -> Result<Var, ModelError>>;

fn op<F, E>(f: F) -> Op
where
    F: Fn(&mut Tape, Var) -> Result<Var, E> + 'static,
    E: Into<ModelError>,
{
    Box::new(move |t, x| f(t, x).map_err(Into::into))
}

fn constant_op(
    c: Tensor,
    f: impl Fn(&mut Tape, Var, Var) -> Result<Var, ModelError> + 'static,
) -> Op {
    Box::new(move |t, x| {
        let cv = t.constant(c.clone());
        f(t, x, cv)
    })
}

fn toy_layout() -> ElectrodeLayout {
    ElectrodeLayout::new(
        vec!["C3".into(), "C4".into(), "O1".into()],
        vec![[-0.7, 0.0, 0.7], [0.7, 0.0, 0.7], [-0.3, -0.95, 0.0]],
    )
    .unwrap()
}

/// Toy model (3 nodes, d = 1, K = 2, one layer, shortened feature net)
/// with jittered parameters so no ReLU sits exactly on its kink.
pub fn toy_model(seed: u64) -> (Model, ParamStore) {
    let cfg = ModelConfig {
        features: FeatureNetConfig::shortened(),
        context: 1,
        cheb_k: 2,
        layers: 1,
        cheb_filters: 4,
        time_filters: 3,
        time_kernel: 3,
        num_domains: 2,
        ..ModelConfig::default()
    };
    let dc = build_dc_adjacency(&toy_layout(), SigmaMode::MeanDistance).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(cfg, &dc, &mut store, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        if store.is_trainable(id) {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    }
    (model, store)
}

pub fn toy_batch(e: usize, seed: u64) -> WindowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = (0..e).map(|i| vec![i.saturating_sub(1), i, (i + 1).min(e - 1)]).collect();
    WindowBatch { epochs: rand_tensor(&[e, 3, 300], &mut rng), windows, fixed_fc: None }
}

fn elementwise_ops(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<usize>, Op)> {
    let other = rand_tensor(&[3, 4], rng);
    let other_b = rand_tensor(&[2, 4, 3], rng);
    let kernel = rand_tensor(&[12, 2], rng);
    let onehot = Tensor::from_rows(&[
        vec![0.0, 0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
    ])
    .unwrap();
    vec![
        ("relu", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.relu(x)))),
        ("sigmoid", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.sigmoid(x)))),
        ("abs", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.abs(x)))),
        ("square", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.square(x)))),
        ("exp", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.exp(x)))),
        ("scale", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.scale(x, -1.5)))),
        ("add_scalar", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.add_scalar(x, 0.3)))),
        (
            "recip",
            vec![3, 4],
            op(|t, x| {
                let s = t.add_scalar(x, 3.0);
                Ok::<_, TensorError>(t.recip(s))
            }),
        ),
        ("add", vec![3, 4], constant_op(other.clone(), |t, x, c| Ok(t.add(x, c)?))),
        ("sub", vec![3, 4], constant_op(other.clone(), |t, x, c| Ok(t.sub(c, x)?))),
        ("mul", vec![3, 4], constant_op(other.clone(), |t, x, c| Ok(t.mul(x, c)?))),
        (
            "div",
            vec![3, 4],
            constant_op(other.clone(), |t, x, c| {
                let d = t.add_scalar(x, 3.0);
                Ok(t.div(c, d)?)
            }),
        ),
        ("permute", vec![2, 3, 4], op(|t, x| t.permute(x, &[2, 0, 1]))),
        ("broadcast", vec![3, 1], op(|t, x| t.broadcast_to(x, &[2, 3, 4]))),
        ("gather", vec![3, 4], op(|t, x| t.gather(x, &[2, 0, 2]))),
        ("narrow", vec![3, 4], op(|t, x| t.narrow(x, 1, 1, 2))),
        (
            "concat",
            vec![3, 4],
            op(|t, x| {
                let s = t.square(x);
                t.concat(&[x, s], 0)
            }),
        ),
        ("sum_axis", vec![2, 3, 4], op(|t, x| t.sum_axis(x, 1))),
        ("mean_axis", vec![2, 3, 4], op(|t, x| t.mean_axis(x, 2))),
        ("matmul", vec![4, 3], constant_op(other.clone(), |t, x, c| Ok(t.matmul(c, x)?))),
        ("bmm", vec![2, 4, 3], constant_op(other_b.clone(), |t, x, c| Ok(t.bmm(x, c, true, false)?))),
        ("softmax_rows", vec![3, 4], op(|t, x| Ok::<_, TensorError>(t.softmax_rows(x)))),
        (
            "cross_entropy",
            vec![3, 4],
            constant_op(onehot, |t, x, y| {
                let p = t.softmax_rows(x);
                Ok(t.cross_entropy(p, y)?)
            }),
        ),
        ("conv1d", vec![2, 7, 4], constant_op(kernel, |t, x, w| Ok(t.conv1d(x, w, None, 3, 2, 1, 1)?))),
        ("maxpool1d", vec![2, 8, 3], op(|t, x| t.maxpool1d(x, 3, 2))),
        (
            "batch_norm",
            vec![5, 3],
            op(|t, x| {
                let g = t.constant(Tensor::vector(vec![1.5, 0.5, -1.0]));
                let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
                let (mut rm, mut rv) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
                t.batch_norm(x, g, b, &mut rm, &mut rv, BatchNormMode::Train)
            }),
        ),
        (
            "dropout",
            vec![3, 4],
            op(|t, x| t.dropout(x, 0.3, true, &mut ChaCha8Rng::seed_from_u64(5))),
        ),
        (
            "lambda_max",
            vec![4, 4],
            op(|t, x| {
                let s = t.bmm(x, x, false, true)?;
                Ok::<_, TensorError>(t.lambda_max(s)?.0)
            }),
        ),
    ]
}

fn graph_and_block_ops(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<usize>, Op)> {
    let (b, t, n, c) = (2, 3, 3, 4);
    let w = rand_tensor(&[c], rng);
    let feats = rand_tensor(&[2, n, c], rng);
    let tv: Vec<Tensor> = [vec![t, t], vec![t, t], vec![n], vec![c, n], vec![c]].iter().map(|s| rand_tensor(s, rng)).collect();
    let sv: Vec<Tensor> = [vec![n, n], vec![n, n], vec![t], vec![c, t], vec![c]].iter().map(|s| rand_tensor(s, rng)).collect();
    let mut sym = rand_tensor(&[n, n], rng);
    for i in 0..n {
        for j in 0..n {
            let v = (sym.data()[i * n + j] + sym.data()[j * n + i]).abs() + 0.1;
            sym.data_mut()[i * n + j] = v;
        }
    }
    let lt = scaled_laplacian(&AdjacencyMatrix::new(AdjacencyKind::Pcc, sym).unwrap()).unwrap();
    let stack = cheb_stack(&lt, 3).unwrap().stacked();
    let theta = rand_tensor(&[3, c, 2], rng);
    let attn = map(rand_tensor(&[b, n, n], rng), |v| 0.5 + 0.5 * v.abs());
    let phi = rand_tensor(&[3 * c, 2], rng);
    let x_other = rand_tensor(&[b, t, n, c], rng);

    let tvars = move |tape: &mut Tape| {
        let v: Vec<Var> = tv.iter().map(|x| tape.constant(x.clone())).collect();
        TemporalAttnVars { v: v[0], b: v[1], m1: v[2], m2: v[3], m3: v[4] }
    };
    let svars = move |tape: &mut Tape| {
        let v: Vec<Var> = sv.iter().map(|x| tape.constant(x.clone())).collect();
        SpatialAttnVars { v: v[0], b: v[1], z1: v[2], z2: v[3], z3: v[4] }
    };
    let stack_b = {
        let s = stack.clone();
        move |tape: &mut Tape| {
            let v = tape.constant(s.clone());
            tape.broadcast_to(v, &[b, t, 3, n, n])
        }
    };
    let stack_b2 = stack_b.clone();
    let attn2 = attn.clone();
    vec![
        ("learn_fc_adjacency.x", vec![2, n, c], {
            let w = w.clone();
            op(move |tape, x| {
                let wv = tape.constant(w.clone());
                learn_fc_adjacency(tape, x, wv)
            })
        }),
        ("learn_fc_adjacency.w", vec![c], {
            let f = feats.clone();
            op(move |tape, wv| {
                let x = tape.constant(f.clone());
                learn_fc_adjacency(tape, x, wv)
            })
        }),
        ("graph_learning_loss", vec![2, n, c], {
            let w = w.clone();
            op(move |tape, x| {
                let wv = tape.constant(w.clone());
                let a = learn_fc_adjacency(tape, x, wv)?;
                graph_learning_loss(tape, x, a, 0.01)
            })
        }),
        (
            "scaled_laplacian+chebyshev",
            vec![n, n],
            op(|tape, a| {
                let sq = tape.square(a);
                let a = tape.add_scalar(sq, 0.1);
                let lt = scaled_laplacian_var(tape, a)?;
                let lt = tape.reshape(lt, &[1, 3, 3])?;
                cheb_polys_var(tape, lt, 3)
            }),
        ),
        ("temporal_attention", vec![b, t, n, c], op(move |tape, x| {
            let p = tvars(tape);
            temporal_attention_apply(tape, x, &p).map(|r| r.0)
        })),
        ("spatial_attention", vec![b, t, n, c], op(move |tape, x| {
            let p = svars(tape);
            spatial_attention(tape, x, &p)
        })),
        ("cheb_graph_conv.x", vec![b, t, n, c], op(move |tape, x| {
            let s = stack_b(tape)?;
            let th = tape.constant(theta.clone());
            let p = tape.constant(attn.clone());
            cheb_graph_conv(tape, x, s, th, p)
        })),
        ("cheb_graph_conv.theta+attention", vec![3, c, 2], op(move |tape, th| {
            let s = stack_b2(tape)?;
            let p = tape.constant(attn2.clone());
            let x = tape.constant(x_other.clone());
            cheb_graph_conv(tape, x, s, th, p)
        })),
        ("temporal_conv", vec![b, t, n, c], op(move |tape, x| {
            let ph = tape.constant(phi.clone());
            let bias = tape.constant(Tensor::vector(vec![0.05, -0.05]));
            temporal_conv(tape, x, ph, Some(bias), 3)
        })),
        ("fuse_views", vec![b, t, n, c], {
            let other = rand_tensor(&[b, t, n, 2], rng);
            op(move |tape, x| {
                let o = tape.constant(other.clone());
                fuse_views(tape, x, o)
            })
        }),
    ]
}

fn check_points(name: &str, shape: &[usize], f: &Op, points: usize, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let p = rand_tensor(shape, rng);
        let err = grad_check(
            |t, x| -> Result<Var, ModelError> {
                let y = f(t, x)?;
                Ok(readout(t, y)?)
            },
            &p,
            1e-5,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference checks of every differentiable operation, the feature
/// network, the heads and the full toy-scale forward pass.
pub fn gradients() -> CheckOutcome {
    const NAME: &str = "gradients";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    let mut note = |name: &str, err: f64| {
        count += 1;
        if err > worst.0 {
            worst = (err, name.to_string());
        }
    };

    let mut ops = elementwise_ops(&mut rng);
    ops.extend(graph_and_block_ops(&mut rng));
    for (name, shape, f) in &ops {
        match check_points(name, shape, f, 3, &mut rng) {
            Ok(e) => note(name, e),
            Err(msg) => return CheckOutcome::new(NAME, false, msg),
        }
    }

    // classifier heads and the combined loss
    let mut store = ParamStore::new();
    let hy = DenseHead::new(&mut store, "y", 4, 5, None, &mut rng).unwrap();
    let hd = DenseHead::new(&mut store, "d", 4, 3, Some(6), &mut rng).unwrap();
    let feats = rand_tensor(&[6, 4], &mut rng);
    let graph = Tensor::scalar(0.37);
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("heads.{}", store.name(id));
        let r = grad_check(
            |t, p| -> Result<Var, ModelError> {
                let mut bind = store.bind(t);
                bind.set(id, p);
                let x = t.constant(feats.clone());
                let py = label_predictor(t, &bind, &hy, x)?;
                let pd = domain_classifier(t, &bind, &hd, x, DomainRouting::Plain)?;
                let g = t.constant(graph.clone());
                Ok(total_loss(t, py, &[0, 1, 2, 3, 4, 0], Some((pd, &[0, 1, 2, 0, 1, 2])), Some(g), 0.7)?.total)
            },
            store.value(id),
            1e-6,
        );
        match r {
            Ok(e) => note(&name, e),
            Err(e) => return CheckOutcome::new(NAME, false, format!("{name}: {e}")),
        }
    }

    // feature network input gradient
    let mut fstore = ParamStore::new();
    let net = FeatureNet::new(FeatureNetConfig::shortened(), &mut fstore, "f", &mut rng).unwrap();
    let x0 = rand_tensor(&[2, 300], &mut rng);
    let r = grad_check(
        |t, x| -> Result<Var, ModelError> {
            let mut s = fstore.clone();
            let bind = s.bind(t);
            let y = net.forward(t, &mut s, &bind, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))?;
            Ok(readout(t, y)?)
        },
        &x0,
        1e-6,
    );
    match r {
        Ok(e) => note("feature_net.input", e),
        Err(e) => return CheckOutcome::new(NAME, false, format!("feature_net: {e}")),
    }

    // full forward pass, one check per parameter group
    let (model, store) = toy_model(11);
    let batch = toy_batch(4, 12);
    let labels = [0, 3, 1, 4];
    let domains = [0, 1, 1, 0];
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let name = format!("model.{}", store.name(id));
        let r = grad_check(
            |t, p| -> Result<Var, ModelError> {
                let mut s = store.clone();
                let mut bind = s.bind(t);
                bind.set(id, p);
                let opts = ForwardOptions { mode: Mode::Train, domain: Some(DomainRouting::Plain) };
                let out = model.forward(t, &mut s, &bind, &batch, opts, &mut ChaCha8Rng::seed_from_u64(0))?;
                let dom = Some((out.domain_probs.unwrap(), &domains[..]));
                Ok(total_loss(t, out.class_probs, &labels, dom, out.graph_loss, 0.5)?.total)
            },
            store.value(id),
            1e-6,
        );
        match r {
            Ok(e) => note(&name, e),
            Err(e) => return CheckOutcome::new(NAME, false, format!("{name}: {e}")),
        }
    }

    let secs = start.elapsed().as_secs_f64();
    CheckOutcome::new(
        NAME,
        worst.0 < 1e-4,
        format!("{count} checks, max relative error {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn dmatrix(t: &Tensor, rows: usize, cols: usize, offset: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &t.data()[offset..offset + rows * cols])
}

/// Chebyshev convolution with all-ones attention against `U g(Λ) Uᵀ X Θ`
/// computed from an eigendecomposition, on random symmetric 5-node graphs.
pub fn spectral(trials: usize) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for seed in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, c, co, k) = (5, 3, 2, 4);
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.gen_range(0.0..1.0);
                a.data_mut()[i * n + j] = v;
                a.data_mut()[j * n + i] = v;
            }
        }
        let lt = scaled_laplacian(&AdjacencyMatrix::new(AdjacencyKind::Pcc, a).unwrap()).unwrap();
        let polys = cheb_stack(&lt, k).unwrap().stacked();
        let xt = rand_tensor(&[1, 1, n, c], &mut rng);
        let tht = rand_tensor(&[k, c, co], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let s = tape.constant(polys);
        let s = tape.broadcast_to(s, &[1, 1, k, n, n]).unwrap();
        let theta = tape.constant(tht.clone());
        let p = tape.constant(Tensor::ones(&[1, n, n]));
        let out = cheb_graph_conv(&mut tape, x, s, theta, p).unwrap();

        let eig = SymmetricEigen::new(dmatrix(&lt, n, n, 0));
        let xm = dmatrix(&xt, n, c, 0);
        let mut oracle = DMatrix::zeros(n, co);
        for i in 0..k {
            let d = eig.eigenvalues.map(|l| (i as f64 * l.clamp(-1.0, 1.0).acos()).cos());
            let filt = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
            oracle += filt * &xm * dmatrix(&tht, c, co, i * c * co);
        }
        worst = worst.max((dmatrix(tape.value(out), n, co, 0) - oracle).abs().max());
    }
    CheckOutcome::new("spectral", worst < 1e-6, format!("{trials} graphs, max abs error {worst:.2e}"))
}

fn fc_adjacency(x: Tensor, w: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.constant(w);
    let a = learn_fc_adjacency(&mut tape, xv, wv).unwrap();
    tape.value(a).clone()
}

/// Learned adjacency is row-stochastic and non-negative; uniform features
/// give exactly `1/N`; a two-node case against hand arithmetic.
pub fn fc_invariants(samples: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_row: f64 = 0.0;
    let mut negative = false;
    for _ in 0..samples {
        let n = rng.gen_range(2..8);
        let f = rng.gen_range(1..6);
        let x = map(rand_tensor(&[n, f], &mut rng), |v| 3.0 * v);
        let w = map(rand_tensor(&[f], &mut rng), |v| 2.0 * v);
        let a = fc_adjacency(x, w);
        for row in a.data().chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            negative |= row.iter().any(|&v| v < 0.0);
        }
    }
    let uniform = fc_adjacency(Tensor::ones(&[4, 3]), Tensor::vector(vec![0.5, -1.0, 2.0]));
    let uniform_exact = uniform.data().iter().all(|&v| v == 0.25);
    // w·|x0 − x1| = ln 3, so each row is softmax(0, ln 3) = (1/4, 3/4)
    let two = fc_adjacency(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap(), Tensor::vector(vec![3f64.ln()]));
    let expect = [0.25, 0.75, 0.75, 0.25];
    let two_err = two.data().iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    CheckOutcome::new(
        "fc-adjacency",
        worst_row < 1e-12 && !negative && uniform_exact && two_err < 1e-12,
        format!(
            "{samples} samples, max row-sum error {worst_row:.1e}, negative entries: {negative}, \
             uniform exact: {uniform_exact}, two-node error {two_err:.1e}"
        ),
    )
}

/// Identical features with a uniform adjacency leave only `λ‖A‖²_F = λ`.
pub fn graph_loss_value() -> CheckOutcome {
    let lambda = 0.001;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 6], 0.3));
    let a = tape.constant(Tensor::full(&[4, 4], 0.25));
    let l = graph_learning_loss(&mut tape, x, a, lambda).unwrap();
    let v = tape.value(l).item();
    CheckOutcome::new("graph-loss", v == lambda, format!("value {v:e}, expected {lambda:e}"))
}

/// Branch shapes of the standard feature network.
pub fn feature_shapes() -> CheckOutcome {
    const EXPECT: [(&str, &[usize]); 15] = [
        ("small.conv0", &[492, 32]),
        ("small.pool1", &[30, 32]),
        ("small.conv1", &[30, 64]),
        ("small.conv2", &[30, 64]),
        ("small.conv3", &[30, 64]),
        ("small.pool2", &[3, 64]),
        ("small.flat", &[192]),
        ("large.conv0", &[53, 64]),
        ("large.pool1", &[6, 64]),
        ("large.conv1", &[6, 64]),
        ("large.conv2", &[6, 64]),
        ("large.conv3", &[6, 64]),
        ("large.pool2", &[1, 64]),
        ("large.flat", &[64]),
        ("concat", &[256]),
    ];
    let mut store = ParamStore::new();
    let net = FeatureNet::new(FeatureNetConfig::standard(), &mut store, "f", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 3000]));
    let mut trace = Vec::new();
    let r = net.forward_traced(&mut tape, &mut store, &bind, x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0), Some(&mut trace));
    if let Err(e) = r {
        return CheckOutcome::new("feature-shapes", false, e.to_string());
    }
    let got: Vec<(&str, &[usize])> = trace.iter().map(|s| (s.stage.as_str(), s.shape.as_slice())).collect();
    let ok = got == EXPECT;
    let mismatch = got.iter().zip(EXPECT.iter()).find(|(a, b)| a != b).map(|(a, b)| format!(", first mismatch {a:?} vs {b:?}"));
    CheckOutcome::new(
        "feature-shapes",
        ok,
        format!("{} stages traced{}", got.len(), mismatch.unwrap_or_default()),
    )
}

fn extractor_domain_grads(model: &Model, store: &ParamStore, batch: &WindowBatch, routing: DomainRouting) -> Vec<Tensor> {
    let mut s = store.clone();
    let mut tape = Tape::new();
    let bind = s.bind(&mut tape);
    let opts = ForwardOptions { mode: Mode::Train, domain: Some(routing) };
    let out = model.forward(&mut tape, &mut s, &bind, batch, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let labels = vec![0; batch.windows.len()];
    let domains: Vec<usize> = (0..batch.windows.len()).map(|i| i % 2).collect();
    let parts = total_loss(&mut tape, out.class_probs, &labels, Some((out.domain_probs.unwrap(), &domains)), None, 0.0).unwrap();
    tape.backward(parts.domain_ce.unwrap()).unwrap();
    store
        .ids()
        .filter(|&id| store.is_trainable(id) && !store.name(id).starts_with("head."))
        .map(|id| tape.grad(bind.get(id)).unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
        .collect()
}

/// Feature-side gradient of the domain loss: reversed with β = 1 it is the
/// negated plain gradient; with β = 0 it is exactly zero.
pub fn grl_contract() -> CheckOutcome {
    let (model, store) = toy_model(31);
    let batch = toy_batch(5, 32);
    let rev = extractor_domain_grads(&model, &store, &batch, DomainRouting::Reversed(1.0));
    let plain = extractor_domain_grads(&model, &store, &batch, DomainRouting::Plain);
    let zero = extractor_domain_grads(&model, &store, &batch, DomainRouting::Reversed(0.0));
    let mut worst: f64 = 0.0;
    let mut norm: f64 = 0.0;
    for (r, p) in rev.iter().zip(&plain) {
        for (a, b) in r.data().iter().zip(p.data()) {
            worst = worst.max((a + b).abs());
            norm = norm.max(b.abs());
        }
    }
    let all_zero = zero.iter().all(|g| g.data().iter().all(|&v| v == 0.0));
    CheckOutcome::new(
        "grl-contract",
        worst < 1e-9 && all_zero && norm > 0.0,
        format!("max |g_rev + g_plain| {worst:.1e} (max |g| {norm:.2e}), zero-scale gradient exactly zero: {all_zero}"),
    )
}

/// Metrics recomputed from precision/recall and marginal probabilities.
fn metric_oracle(rows: &[Vec<u64>]) -> (f64, Vec<f64>, f64, f64) {
    let c = rows.len();
    let n: f64 = rows.iter().flatten().map(|&v| v as f64).sum();
    let acc = (0..c).map(|i| rows[i][i] as f64).sum::<f64>() / n;
    let f1: Vec<f64> = (0..c)
        .map(|k| {
            let tp = rows[k][k] as f64;
            let fn_: f64 = (0..c).filter(|&j| j != k).map(|j| rows[k][j] as f64).sum();
            let fp: f64 = (0..c).filter(|&i| i != k).map(|i| rows[i][k] as f64).sum();
            if tp == 0.0 {
                return 0.0;
            }
            let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
            2.0 * p * r / (p + r)
        })
        .collect();
    let mf1 = f1.iter().sum::<f64>() / c as f64;
    let pe: f64 = (0..c)
        .map(|k| (rows[k].iter().sum::<u64>() as f64 / n) * ((0..c).map(|i| rows[i][k]).sum::<u64>() as f64 / n))
        .sum();
    let kappa = if pe >= 1.0 { 0.0 } else { (acc - pe) / (1.0 - pe) };
    (acc, f1, mf1, kappa)
}

pub fn metrics_oracle(matrices: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..matrices {
        let rows: Vec<Vec<u64>> = (0..5).map(|_| (0..5).map(|_| rng.gen_range(0..50)).collect()).collect();
        if rows.iter().flatten().all(|&v| v == 0) {
            continue;
        }
        let m = Metrics::from_confusion(ConfusionMatrix::from_rows(&rows).unwrap());
        let (acc, f1, mf1, kappa) = metric_oracle(&rows);
        worst = worst.max((m.accuracy - acc).abs()).max((m.macro_f1 - mf1).abs()).max((m.kappa - kappa).abs());
        for (a, b) in m.per_class_f1.iter().zip(&f1) {
            worst = worst.max((a - b).abs());
        }
    }
    let w = Metrics::from_confusion(ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).unwrap());
    let worked = (w.accuracy - 0.7).abs() < 1e-12 && (w.kappa - 0.4).abs() < 1e-12;
    CheckOutcome::new(
        "metrics-oracle",
        worst < 1e-12 && worked,
        format!(
            "{matrices} matrices, max deviation {worst:.1e}; worked matrix accuracy {:.4}, kappa {:.4}",
            w.accuracy, w.kappa
        ),
    )
}

pub fn container_roundtrip() -> CheckOutcome {
    let spec = SyntheticSpec { subjects: 2, epochs_per_subject: 7, samples: 50, ..SyntheticSpec::default() };
    let (_, ds) = generate_synthetic(&spec).unwrap();
    let outcome = ds.to_bytes().and_then(|b| Ok((Dataset::from_bytes(&b)?, b)));
    let ok = match &outcome {
        Ok((back, bytes)) => back == &ds && back.to_bytes().map(|b| &b == bytes).unwrap_or(false),
        Err(_) => false,
    };
    let mut corrupt = ds.to_bytes().unwrap();
    corrupt[30] ^= 0x10;
    let rejected = Dataset::from_bytes(&corrupt).is_err();
    CheckOutcome::new(
        "container",
        ok && rejected,
        format!("{} records round-trip bit-exact: {ok}; corrupted copy rejected: {rejected}", ds.len()),
    )
}

/// Every suite, in report order.
pub fn all() -> Vec<CheckOutcome> {
    vec![
        gradients(),
        spectral(50),
        fc_invariants(100),
        graph_loss_value(),
        feature_shapes(),
        grl_contract(),
        metrics_oracle(1000),
        container_roundtrip(),
    ]
}
