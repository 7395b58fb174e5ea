//! Dense reference implementation of the attention stacks.
//!
//! Slow, obviously-correct counterpart to the sparse tape kernels: attention
//! is materialized as full dst-by-src matrices with absent edges masked to
//! negative infinity before the softmax, and every projection is a naive
//! loop. Tests and the acceptance suite compare the production forward
//! against these functions; nothing here records gradients.
//!
//! Parameters are fetched from the store by name, so a wrong registration
//! wiring in the model shows up as a mismatch. Missing names panic; this
//! module is meant for verification, not production inference.

use super::ModelConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::graph::SparseGraph;
use std::collections::HashMap;

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    let id = store
        .lookup(name)
        .unwrap_or_else(|| panic!("reference: missing parameter {name:?}"));
    &store.get(id).value
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(x.cols, w.rows);
    let mut out = Tensor::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        for o in 0..w.cols {
            let mut acc = b.at(0, o);
            for k in 0..x.cols {
                acc += x.at(i, k) * w.at(k, o);
            }
            out.set(i, o, acc);
        }
    }
    out
}

fn mlp2(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    let mut h = linear(x, w1, b1);
    for v in h.data.iter_mut() {
        *v = v.max(0.0);
    }
    linear(&h, w2, b2)
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let d = x.cols as f64;
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let invstd = 1.0 / (var + 1e-5).sqrt();
        for c in 0..x.cols {
            let xhat = (row[c] - mean) * invstd;
            out.set(r, c, xhat * gain.at(0, c) + bias.at(0, c));
        }
    }
    out
}

fn add_into(h: &mut Tensor, delta: &Tensor) {
    for (a, &b) in h.data.iter_mut().zip(delta.data.iter()) {
        *a += b;
    }
}

fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let mut out = Tensor::zeros(x.rows, len);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
    }
    out
}

/// Row-wise softmax where non-finite entries are masked out. A row with no
/// finite entry becomes all zeros (a node with no in-edges attends to
/// nothing).
fn masked_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            continue;
        }
        let mut sum = 0.0;
        let mut exps = vec![0.0; row.len()];
        for (j, &v) in row.iter().enumerate() {
            if v.is_finite() {
                let e = (v - max).exp();
                exps[j] = e;
                sum += e;
            }
        }
        for (j, e) in exps.into_iter().enumerate() {
            out.set(r, j, e / sum);
        }
    }
    out
}

/// One pre-LN residual self-attention block over `graph`, reading parameters
/// under `prefix` (expects `.ln`, `.q`, `.k`, `.v`, `.o` children). Returns
/// the updated features and the per-head dense attention maps.
fn dense_self_attention(
    cfg: &ModelConfig,
    store: &ParamStore,
    prefix: &str,
    h: &Tensor,
    graph: &SparseGraph,
) -> (Tensor, Vec<Tensor>) {
    let n = h.rows;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let z = layer_norm(h, p(store, &format!("{prefix}.ln.gain")), p(store, &format!("{prefix}.ln.bias")));
    let q = linear(&z, p(store, &format!("{prefix}.q.w")), p(store, &format!("{prefix}.q.b")));
    let k = linear(&z, p(store, &format!("{prefix}.k.w")), p(store, &format!("{prefix}.k.b")));
    let v = linear(&z, p(store, &format!("{prefix}.v.w")), p(store, &format!("{prefix}.v.b")));

    let mut exists = vec![vec![false; n]; n];
    for &(s, d) in &graph.edges {
        exists[d][s] = true;
    }

    let mut concat = Tensor::zeros(n, cfg.d);
    let mut alphas = Vec::with_capacity(heads);
    for c in 0..heads {
        let qc = slice_cols(&q, c * dh, dh);
        let kc = slice_cols(&k, c * dh, dh);
        let vc = slice_cols(&v, c * dh, dh);
        let mut logits = Tensor::filled(n, n, f64::NEG_INFINITY);
        for i in 0..n {
            for j in 0..n {
                if exists[i][j] {
                    let dot: f64 =
                        (0..dh).map(|x| qc.at(i, x) * kc.at(j, x)).sum::<f64>() * scale;
                    logits.set(i, j, dot);
                }
            }
        }
        let alpha = masked_softmax_rows(&logits);
        for i in 0..n {
            for x in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    let a = alpha.at(i, j);
                    if a != 0.0 {
                        acc += a * vc.at(j, x);
                    }
                }
                concat.set(i, c * dh + x, acc);
            }
        }
        alphas.push(alpha);
    }
    let o = linear(&concat, p(store, &format!("{prefix}.o.w")), p(store, &format!("{prefix}.o.b")));
    let mut out = h.clone();
    add_into(&mut out, &o);
    (out, alphas)
}

fn dense_ffn(store: &ParamStore, prefix: &str, h: &Tensor) -> Tensor {
    let z = layer_norm(h, p(store, &format!("{prefix}.ln.gain")), p(store, &format!("{prefix}.ln.bias")));
    let f = mlp2(
        &z,
        p(store, &format!("{prefix}.w1")),
        p(store, &format!("{prefix}.b1")),
        p(store, &format!("{prefix}.w2")),
        p(store, &format!("{prefix}.b2")),
    );
    let mut out = h.clone();
    add_into(&mut out, &f);
    out
}

/// Dense track encoder. Returns the encoded features and, per layer, the
/// per-head dense attention maps (num_dst, num_src).
pub fn dense_encode(
    cfg: &ModelConfig,
    store: &ParamStore,
    h0: &Tensor,
    graph: &SparseGraph,
) -> (Tensor, Vec<Vec<Tensor>>) {
    let mut h = h0.clone();
    if h.rows == 0 {
        return (h, Vec::new());
    }
    let mut traces = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let (next, alphas) = dense_self_attention(cfg, store, &format!("enc{l}.attn"), &h, graph);
        h = dense_ffn(store, &format!("enc{l}.ffn"), &next);
        traces.push(alphas);
    }
    if cfg.encoder_layers > 0 {
        h = layer_norm(&h, p(store, "enc.out_ln.gain"), p(store, "enc.out_ln.bias"));
    }
    (h, traces)
}

/// Dense decoder; see [`dense_decode_opt`]. Edge bias included.
pub fn dense_decode(
    cfg: &ModelConfig,
    store: &ParamStore,
    h_d0: &Tensor,
    det_graph: &SparseGraph,
    h_enc: &Tensor,
    assoc: &SparseGraph,
    h_a0: &Tensor,
) -> (Tensor, Tensor, Vec<Vec<Tensor>>) {
    dense_decode_opt(cfg, store, h_d0, det_graph, h_enc, assoc, h_a0, true)
}

/// Dense decoder with the edge-bias term in the cross-attention logits made
/// optional, so tests can compare a zeroed-bias model against literal plain
/// dot-product attention. Returns final detection features, final edge
/// features, and per-layer per-head cross-attention maps (num_dets,
/// num_tracks).
#[allow(clippy::too_many_arguments)]
pub fn dense_decode_opt(
    cfg: &ModelConfig,
    store: &ParamStore,
    h_d0: &Tensor,
    det_graph: &SparseGraph,
    h_enc: &Tensor,
    assoc: &SparseGraph,
    h_a0: &Tensor,
    include_edge_bias: bool,
) -> (Tensor, Tensor, Vec<Vec<Tensor>>) {
    let (n_d, n_t) = (assoc.num_dst, assoc.num_src);
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut edge_of: HashMap<(usize, usize), usize> = HashMap::new();
    for (e, &(s, d)) in assoc.edges.iter().enumerate() {
        edge_of.insert((d, s), e);
    }

    let mut h_d = h_d0.clone();
    let mut h_a = h_a0.clone();
    let mut traces = Vec::with_capacity(cfg.decoder_layers);
    for l in 0..cfg.decoder_layers {
        let (next, _) = dense_self_attention(cfg, store, &format!("dec{l}.self"), &h_d, det_graph);
        h_d = next;

        let zq = layer_norm(
            &h_d,
            p(store, &format!("dec{l}.cross.ln_q.gain")),
            p(store, &format!("dec{l}.cross.ln_q.bias")),
        );
        let q = linear(&zq, p(store, &format!("dec{l}.cross.q.w")), p(store, &format!("dec{l}.cross.q.b")));
        let k = linear(h_enc, p(store, &format!("dec{l}.cross.k.w")), p(store, &format!("dec{l}.cross.k.b")));
        let v = linear(h_enc, p(store, &format!("dec{l}.cross.v.w")), p(store, &format!("dec{l}.cross.v.b")));
        let bias = if include_edge_bias {
            let ze = layer_norm(
                &h_a,
                p(store, &format!("dec{l}.cross.edge_ln.gain")),
                p(store, &format!("dec{l}.cross.edge_ln.bias")),
            );
            Some(linear(&ze, p(store, &format!("dec{l}.cross.wa")), &Tensor::zeros(1, heads)))
        } else {
            None
        };

        let mut concat = Tensor::zeros(n_d, cfg.d);
        let mut alphas = Vec::with_capacity(heads);
        let mut edge_logits = Tensor::zeros(assoc.num_edges(), heads);
        for c in 0..heads {
            let qc = slice_cols(&q, c * dh, dh);
            let kc = slice_cols(&k, c * dh, dh);
            let vc = slice_cols(&v, c * dh, dh);
            let mut logits = Tensor::filled(n_d, n_t, f64::NEG_INFINITY);
            for i in 0..n_d {
                for j in 0..n_t {
                    if let Some(&e) = edge_of.get(&(i, j)) {
                        let mut val: f64 =
                            (0..dh).map(|x| qc.at(i, x) * kc.at(j, x)).sum::<f64>() * scale;
                        if let Some(b) = &bias {
                            val += b.at(e, c);
                        }
                        logits.set(i, j, val);
                        edge_logits.set(e, c, val);
                    }
                }
            }
            let alpha = masked_softmax_rows(&logits);
            for i in 0..n_d {
                for x in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n_t {
                        let a = alpha.at(i, j);
                        if a != 0.0 {
                            acc += a * vc.at(j, x);
                        }
                    }
                    concat.set(i, c * dh + x, acc);
                }
            }
            alphas.push(alpha);
        }
        traces.push(alphas);

        let o = linear(
            &concat,
            p(store, &format!("dec{l}.cross.o.w")),
            p(store, &format!("dec{l}.cross.o.b")),
        );
        for i in 0..n_d {
            if assoc.edges.iter().any(|&(_, d)| d == i) {
                for cix in 0..cfg.d {
                    let cur = h_d.at(i, cix);
                    h_d.set(i, cix, cur + o.at(i, cix));
                }
            }
        }
        h_d = dense_ffn(store, &format!("dec{l}.ffn"), &h_d);

        let eo = linear(
            &edge_logits,
            p(store, &format!("dec{l}.edge.o.w")),
            p(store, &format!("dec{l}.edge.o.b")),
        );
        add_into(&mut h_a, &eo);
        h_a = dense_ffn(store, &format!("dec{l}.edge.ffn"), &h_a);
    }
    let h_d = layer_norm(&h_d, p(store, "dec.node_ln.gain"), p(store, "dec.node_ln.bias"));
    let h_a = layer_norm(&h_a, p(store, "dec.edge_ln.gain"), p(store, "dec.edge_ln.bias"));
    (h_d, h_a, traces)
}
