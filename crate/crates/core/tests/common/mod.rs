//! Helpers and independent oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::sync::Arc;

use nbaiot_core::engine::{grad_check, Axis, Csr, EngineError, ParamStore, Tape, Tensor, Var};
use nbaiot_core::gnn::{GatConfig, GcnConfig, GnnConfig, GnnModel};
use nbaiot_core::knn::Graph;
use nbaiot_core::nn::MlpHead;
use nbaiot_core::vae::{standard_normal, VaeConfig, VaeModel};
use nbaiot_core::vit::{VitClassifier, VitConfig, VitModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-3;
pub const TOL: f64 = 1e-2;

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

/// Values bounded away from zero so finite differences never straddle a kink.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f32 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Scalar `sum(y * weights)` so every output coordinate carries a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var, EngineError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    let means = tape.mean_rows(prod)?;
    let n = tape.value(means).cols();
    let rows = tape.value(prod).rows() as f32;
    let ones = tape.constant(Tensor::full(n, 1, rows));
    tape.matmul(means, ones)
}

pub fn check(
    store: &mut ParamStore,
    seed: u64,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var, EngineError>,
) -> f64 {
    let report = grad_check(store, EPS, 200, seed, f).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    report.max_rel_error
}

pub fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..=16),
        rng.random_range(1..=16),
        rng.random_range(1..=16),
    )
}

/// Every elementwise, reduction and loss primitive on random shapes up to 16.
pub fn primitive_grad_suite() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..12 {
        let (m, k, n) = dims(&mut rng);
        let out_w = rand_matrix(&mut rng, m, n);

        let mut s = ParamStore::new();
        s.insert("a", rand_matrix(&mut rng, m, k)).unwrap();
        s.insert("b", rand_matrix(&mut rng, k, n)).unwrap();
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            let y = t.matmul(a, b)?;
            weighted_sum(t, y, &out_w)
        }));

        let mut s = ParamStore::new();
        s.insert("x", rand_matrix(&mut rng, m, n)).unwrap();
        s.insert("b", rand_matrix(&mut rng, 1, n)).unwrap();
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (x, b) = (t.param(s, "x")?, t.param(s, "b")?);
            let y = t.add_bias(x, b)?;
            weighted_sum(t, y, &out_w)
        }));

        let mut s = ParamStore::new();
        s.insert("x", rand_away_from_zero(&mut rng, m, n)).unwrap();
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.relu(x)?;
            weighted_sum(t, y, &out_w)
        }));
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.leaky_relu(x, 0.2)?;
            weighted_sum(t, y, &out_w)
        }));
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.softmax_rows(x)?;
            weighted_sum(t, y, &out_w)
        }));
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.exp(x)?;
            let y = t.scale(y, 0.5)?;
            weighted_sum(t, y, &out_w)
        }));

        let mut s = ParamStore::new();
        s.insert("x", rand_matrix(&mut rng, m, n)).unwrap();
        s.insert("y", rand_matrix(&mut rng, m, n)).unwrap();
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            let p = t.mul(x, y)?;
            let q = t.add(p, x)?;
            weighted_sum(t, q, &out_w)
        }));
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            t.mse_loss(x, y)
        }));
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            t.gaussian_kl(x, y)
        }));
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            t.cross_entropy_loss(x, &labels)
        }));
        let cat_w = rand_matrix(&mut rng, m, 2 * n);
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            let c = t.concat(x, y, Axis::Cols)?;
            weighted_sum(t, c, &cat_w)
        }));
        let cat_w = rand_matrix(&mut rng, 2 * m, n);
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            let c = t.concat(x, y, Axis::Rows)?;
            weighted_sum(t, c, &cat_w)
        }));
        let mean_w = rand_matrix(&mut rng, 1, n);
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            let c = t.mean_rows(x)?;
            weighted_sum(t, c, &mean_w)
        }));
        let picks: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..m)).collect();
        let sel_w = rand_matrix(&mut rng, picks.len(), n);
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            let c = t.select_rows(x, picks.clone())?;
            weighted_sum(t, c, &sel_w)
        }));
    }
    worst
}

/// Sparse propagation, edge attention, self-attention and token plumbing.
pub fn structured_grad_suite() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..8 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        // random symmetric pattern with self-loops
        let mut adj = vec![vec![false; n]; n];
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = true;
        }
        for _ in 0..2 * n {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            adj[i][j] = true;
            adj[j][i] = true;
        }
        let mut offsets = vec![0];
        let mut indices = vec![];
        let mut values = vec![];
        for row in &adj {
            for (j, &on) in row.iter().enumerate() {
                if on {
                    indices.push(j);
                    values.push(rng.random_range(0.1..1.0));
                }
            }
            offsets.push(indices.len());
        }
        let csr = Arc::new(Csr {
            n,
            offsets,
            indices,
            values: Some(values),
        });
        let out_w = rand_matrix(&mut rng, n, d);

        let mut s = ParamStore::new();
        s.insert("x", rand_matrix(&mut rng, n, d)).unwrap();
        let g = csr.clone();
        worst = worst.max(check(&mut s, trial, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.spmm(g.clone(), x)?;
            weighted_sum(t, y, &out_w)
        }));

        let mut s = ParamStore::new();
        s.insert("scores", rand_matrix(&mut rng, n, 2)).unwrap();
        s.insert("feats", rand_matrix(&mut rng, n, d)).unwrap();
        let g = csr.clone();
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (sc, f) = (t.param(s, "scores")?, t.param(s, "feats")?);
            let y = t.edge_attention(sc, f, g.clone(), 0.2)?;
            weighted_sum(t, y, &out_w)
        }));

        let tokens = rng.random_range(1..=5);
        let groups = rng.random_range(1..=3);
        let heads = rng.random_range(1..=2);
        let width = heads * rng.random_range(1..=4);
        let rows = tokens * groups;
        let att_w = rand_matrix(&mut rng, rows, width);
        let mut s = ParamStore::new();
        for name in ["q", "k", "v"] {
            s.insert(name, rand_matrix(&mut rng, rows, width)).unwrap();
        }
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (q, k, v) = (t.param(s, "q")?, t.param(s, "k")?, t.param(s, "v")?);
            let y = t.self_attention(q, k, v, tokens, heads)?;
            weighted_sum(t, y, &att_w)
        }));

        let mut s = ParamStore::new();
        s.insert("x", rand_matrix(&mut rng, rows, width)).unwrap();
        s.insert("cls", rand_matrix(&mut rng, 1, width)).unwrap();
        s.insert("pos", rand_matrix(&mut rng, tokens + 1, width))
            .unwrap();
        let tok_w = rand_matrix(&mut rng, rows + groups, width);
        worst = worst.max(check(&mut s, trial, |t, s| {
            let (x, c, p) = (t.param(s, "x")?, t.param(s, "cls")?, t.param(s, "pos")?);
            let y = t.prepend_row(x, c, tokens)?;
            let y = t.add_tiled(y, p)?;
            weighted_sum(t, y, &tok_w)
        }));
    }
    worst
}

pub fn mlp_cross_entropy_grad_case() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_matrix(&mut rng, 8, 6);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let mut s = ParamStore::new();
    s.insert("w1", rand_matrix(&mut rng, 6, 10)).unwrap();
    s.insert("b1", rand_matrix(&mut rng, 1, 10)).unwrap();
    s.insert("w2", rand_matrix(&mut rng, 10, 3)).unwrap();
    s.insert("b2", rand_matrix(&mut rng, 1, 3)).unwrap();
    check(&mut s, 0, |t, s| {
        let xin = t.constant(x.clone());
        let w1 = t.param(s, "w1")?;
        let b1 = t.param(s, "b1")?;
        let h = t.matmul(xin, w1)?;
        let h = t.add_bias(h, b1)?;
        let h = t.relu(h)?;
        let w2 = t.param(s, "w2")?;
        let b2 = t.param(s, "b2")?;
        let o = t.matmul(h, w2)?;
        let o = t.add_bias(o, b2)?;
        t.cross_entropy_loss(o, &labels)
    })
}

fn jitter_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        if name.ends_with(".bias") {
            let cols = p.value.cols();
            p.value = Tensor::matrix(
                1,
                cols,
                (0..cols).map(|_| rng.random_range(0.05..0.3)).collect(),
            );
        }
    }
}

/// Full negative ELBO with frozen noise, 8 samples.
pub fn vae_elbo_grad_case() -> f64 {
    let config = VaeConfig {
        encoder_widths: vec![6, 5, 4],
        latent_dim: 3,
        decoder_widths: vec![4, 5, 6],
        ..VaeConfig::default()
    };
    let mut model = VaeModel::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_matrix(&mut rng, 8, 6);
    let noise = standard_normal(8, 3, &mut rng);
    jitter_biases(&mut model.store, &mut rng);
    // A damped decoder keeps the loss near unit scale, so the f32 rounding of
    // the loss stays far below the finite-difference signal.
    for (name, p) in model.store.iter_mut() {
        if name.starts_with("dec.") && name.ends_with(".weight") {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 0.6);
        }
    }
    let cfg = model.config.clone();
    check(&mut model.store, 9, |tape, store| {
        let m = VaeModel {
            config: cfg.clone(),
            store: store.clone(),
        };
        let xv = tape.constant(x.clone());
        Ok(m.elbo_loss(tape, xv, noise.clone())?.total)
    })
}

/// Encoder and head under one cross-entropy loss, 8 samples. Encoder and
/// head parameters live in separate stores and are checked in turn.
pub fn vit_mlp_grad_case() -> f64 {
    let config = VitConfig {
        image_rows: 2,
        image_cols: 3,
        embed_dim: 4,
        heads: 2,
        layers: 1,
        ffn_hidden: 5,
        output_dim: 3,
        ..VitConfig::default()
    };
    let mut model = VitClassifier::new(config, 4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records = rand_matrix(&mut rng, 8, 6);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    jitter_biases(&mut model.encoder.store, &mut rng);
    jitter_biases(&mut model.head.store, &mut rng);
    let patches = model.encoder.patch_batch(records.data()).unwrap();

    let head = model.head.clone();
    let enc_cfg = model.encoder.config.clone();
    let enc_err = check(&mut model.encoder.store, 3, |tape, store| {
        let encoder = VitModel {
            config: enc_cfg.clone(),
            store: store.clone(),
        };
        let p = tape.constant(patches.clone());
        let mut h = encoder.encoder_forward(tape, p)?;
        // Head weights enter as constants so only encoder gradients are recorded.
        for i in 0..head.layers() {
            let w = tape.constant(head.store.value(&format!("mlp.{i}.weight"))?.clone());
            let b = tape.constant(head.store.value(&format!("mlp.{i}.bias"))?.clone());
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i + 1 < head.layers() {
                h = tape.relu(h)?;
            }
        }
        tape.cross_entropy_loss(h, &labels)
    });

    let rep = model.encoder.represent(records.data()).unwrap();
    let rep = Tensor::matrix(8, model.encoder.config.output_dim, rep);
    let dims = model.head.dims.clone();
    let head_err = check(&mut model.head.store, 4, |tape, store| {
        let head = MlpHead {
            dims: dims.clone(),
            store: store.clone(),
        };
        let r = tape.constant(rep.clone());
        let logits = head.forward(tape, r)?;
        tape.cross_entropy_loss(logits, &labels)
    });
    enc_err.max(head_err)
}

/// Random directed graph: every ordered pair is an edge with probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges).unwrap()
}

fn gnn_loss_case(config: GnnConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let graph = random_graph(&mut rng, n, 0.2).normalized();
    let csr = graph.to_csr();
    let x = rand_matrix(&mut rng, n, config.input_dim());
    let classes = config.classes();
    let fit: Vec<usize> = (0..n / 2).collect();
    let labels: Vec<usize> = fit.iter().map(|&i| i % classes).collect();
    let mut model = GnnModel::new(config.clone(), &mut rng).unwrap();
    jitter_biases(&mut model.store, &mut rng);
    check(&mut model.store, seed, |tape, store| {
        let m = GnnModel {
            config: config.clone(),
            store: store.clone(),
        };
        let xv = tape.constant(x.clone());
        let logits = m.forward(tape, &csr, xv)?;
        tape.cross_entropy_rows(logits, fit.clone(), labels.clone())
    })
}

/// Two GCN layers, loss over the first half of the nodes.
pub fn gcn_grad_case() -> f64 {
    gnn_loss_case(
        GnnConfig::Gcn(GcnConfig {
            dims: vec![4, 5, 3],
        }),
        21,
    )
}

/// One multi-head GAT layer, loss over the first half of the nodes.
pub fn gat_grad_case() -> f64 {
    gnn_loss_case(
        GnnConfig::Gat(GatConfig {
            input_dim: 4,
            heads: 2,
            head_dim: 3,
            hidden_layers: 0,
            classes: 3,
            slope: 0.2,
        }),
        22,
    )
}

/// Every primitive plus every full model loss; returns the worst error seen.
pub fn full_grad_suite() -> f64 {
    [
        primitive_grad_suite(),
        structured_grad_suite(),
        mlp_cross_entropy_grad_case(),
        vae_elbo_grad_case(),
        vit_mlp_grad_case(),
        gcn_grad_case(),
        gat_grad_case(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// O(N^2) kNN: full sort of every candidate by `(distance, index)`.
pub fn brute_knn(emb: &[f32], dim: usize, k: usize) -> Vec<Vec<usize>> {
    let n = emb.len() / dim;
    (0..n)
        .map(|i| {
            let a = &emb[i * dim..(i + 1) * dim];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let b = &emb[j * dim..(j + 1) * dim];
                    let d: f64 = a
                        .iter()
                        .zip(b)
                        .map(|(&x, &y)| {
                            let t = x as f64 - y as f64;
                            t * t
                        })
                        .sum();
                    (d, j)
                })
                .collect();
            cand.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
            let mut out: Vec<usize> = cand[..k].iter().map(|c| c.1).collect();
            out.sort_unstable();
            out
        })
        .collect()
}

/// Dense `n x m` row-major product in f64.
pub fn dense_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for t in 0..k {
            let v = a[i * k + t];
            for j in 0..m {
                out[i * m + j] += v * b[t * m + j];
            }
        }
    }
    out
}

/// `D^{-1/2} (A + I) D^{-1/2} X W` from a raw directed graph, with `A` the
/// symmetrized adjacency, computed densely in f64.
pub fn dense_gcn(raw: &Graph, x: &[f64], w: &[f64], d: usize, k: usize) -> Vec<f64> {
    let n = raw.n;
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for &j in raw.neighbors(i) {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
        a[i * n + i] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    let xw = dense_matmul(x, w, n, d, k);
    dense_matmul(&a, &xw, n, n, k)
}

/// Single GAT head computed edge by edge in f64. Returns the output rows and
/// the attention weights in CSR edge order.
pub fn dense_gat_head(
    graph: &Graph,
    x: &[f64],
    w: &[f64],
    a: &[f64],
    d: usize,
    k: usize,
    slope: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = graph.n;
    let h = dense_matmul(x, w, n, d, k);
    let s = dense_matmul(&h, a, n, k, 2);
    let mut out = vec![0.0; n * k];
    let mut alpha = Vec::with_capacity(graph.num_edges());
    for i in 0..n {
        let e: Vec<f64> = graph
            .neighbors(i)
            .iter()
            .map(|&j| {
                let v = s[i * 2] + s[j * 2 + 1];
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            })
            .collect();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
        for (&j, ev) in graph.neighbors(i).iter().zip(&e) {
            let al = (ev - m).exp() / z;
            alpha.push(al);
            for c in 0..k {
                out[i * k + c] += al * h[j * k + c];
            }
        }
    }
    (out, alpha)
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs one GCN layer `spmm(X W)` on the tape.
pub fn tape_gcn(csr: &Arc<Csr>, x: &Tensor, w: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = nbaiot_core::gnn::gcn_layer(&mut tape, csr, xv, wv).unwrap();
    tape.value(y).clone()
}

/// Runs one GAT head on the tape; returns the output and the attention weights.
pub fn tape_gat(
    csr: &Arc<Csr>,
    x: &Tensor,
    w: &Tensor,
    a: &Tensor,
    slope: f32,
) -> (Tensor, Vec<f32>) {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let av = tape.constant(a.clone());
    let y = nbaiot_core::gnn::gat_head(&mut tape, csr, xv, wv, av, slope).unwrap();
    let alpha = tape.edge_attention_weights(y).unwrap().to_vec();
    (tape.value(y).clone(), alpha)
}
