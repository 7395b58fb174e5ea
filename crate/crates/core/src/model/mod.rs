//! Track-detection graph transformer.
//!
//! Three stages share one parameter store. MLP embeddings lift raw node and
//! edge features to the model width. An encoder refines track features with
//! sparse self-attention over the track graph. A decoder alternates detection
//! self-attention, cross-attention against the encoded tracks, and an edge
//! feature update; association edge features bias the cross-attention logits
//! and are rebuilt from them, so the edge stream and the node stream inform
//! each other at every layer.
//!
//! Attention is computed per edge (gather, dot, segment softmax), so cost
//! scales with edge count rather than node count squared. [`reference`]
//! holds a dense counterpart used to validate these kernels.

pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::graph::{SparseGraph, ASSOC_EDGE_FEATURES, DETECTION_FEATURE_BASE};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width shared by every attention and FFN block.
    pub d: usize,
    /// Attention heads; each head works at width `d / heads`.
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Drop probability applied to every sublayer output during training.
    pub dropout: f64,
    /// FFN hidden width as a multiple of `d`.
    pub ffn_multiplier: usize,
    /// Object classes; fixes the detection feature width.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            heads: 8,
            encoder_layers: 1,
            decoder_layers: 3,
            dropout: 0.1,
            ffn_multiplier: 2,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 {
            return Err(Error::config("model width and head count must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::config("at least one decoder layer is required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::config("ffn multiplier must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("at least one class is required"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d * self.ffn_multiplier
    }

    /// Raw detection node feature width accepted by [`Model::embed_detections`].
    pub fn det_input_width(&self) -> usize {
        DETECTION_FEATURE_BASE + self.num_classes
    }

    /// Raw association edge feature width accepted by [`Model::embed_edges`].
    pub fn edge_input_width(&self) -> usize {
        ASSOC_EDGE_FEATURES
    }
}

/// Per-call dropout state. Each sublayer output consumes one site counter, so
/// a single (rate, key) pair yields an independent, reproducible mask at
/// every application point.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    train: bool,
    key: u64,
    site: u64,
}

impl Dropout {
    pub fn train(rate: f64, key: u64) -> Self {
        Dropout { rate, train: true, key, site: 0 }
    }

    pub fn eval() -> Self {
        Dropout { rate: 0.0, train: false, key: 0, site: 0 }
    }

    fn apply(&mut self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let site_key = self.key ^ self.site.wrapping_mul(0x2545_F491_4F6C_DD1D);
        self.site += 1;
        t.dropout(x, self.rate, site_key, self.train)
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    ln: LnIds,
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    ln: LnIds,
    mlp: MlpIds,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayerIds {
    attn: AttnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayerIds {
    self_attn: AttnIds,
    cross_ln_q: LnIds,
    cross_q: LinearIds,
    cross_k: LinearIds,
    cross_v: LinearIds,
    cross_edge_ln: LnIds,
    /// (d, heads); column c maps an edge feature to head c's logit bias.
    cross_wa: ParamId,
    cross_o: LinearIds,
    ffn: FfnIds,
    /// (heads, d); lifts the per-head pre-softmax logits back to model width.
    edge_o: LinearIds,
    edge_ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct ModelParams {
    embed_det: MlpIds,
    embed_edge: MlpIds,
    encoder: Vec<EncoderLayerIds>,
    encoder_final_ln: Option<LnIds>,
    decoder: Vec<DecoderLayerIds>,
    node_final_ln: LnIds,
    edge_final_ln: LnIds,
    affinity: MlpIds,
    velocity: MlpIds,
}

/// Cross-attention weights recorded by [`Model::decode_traced`], one
/// (num_edges, heads) matrix per decoder layer with rows in association edge
/// order. Useful for inspecting what a trained model attends to.
#[derive(Debug, Default, Clone)]
pub struct DecodeTrace {
    pub cross_weights: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    ids: ModelParams,
}

fn linear_ids(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    inp: usize,
    out: usize,
) -> Result<LinearIds> {
    Ok(LinearIds {
        w: store.add_xavier(format!("{prefix}.w"), inp, out, rng)?,
        b: store.add_zeros(format!("{prefix}.b"), 1, out)?,
    })
}

fn ln_ids(store: &mut ParamStore, prefix: &str, d: usize) -> Result<LnIds> {
    Ok(LnIds {
        gain: store.add_filled(format!("{prefix}.gain"), 1, d, 1.0)?,
        bias: store.add_zeros(format!("{prefix}.bias"), 1, d)?,
    })
}

fn mlp_ids(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    inp: usize,
    hidden: usize,
    out: usize,
) -> Result<MlpIds> {
    Ok(MlpIds {
        w1: store.add_xavier(format!("{prefix}.w1"), inp, hidden, rng)?,
        b1: store.add_zeros(format!("{prefix}.b1"), 1, hidden)?,
        w2: store.add_xavier(format!("{prefix}.w2"), hidden, out, rng)?,
        b2: store.add_zeros(format!("{prefix}.b2"), 1, out)?,
    })
}

fn attn_ids(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    d: usize,
) -> Result<AttnIds> {
    Ok(AttnIds {
        ln: ln_ids(store, &format!("{prefix}.ln"), d)?,
        q: linear_ids(store, rng, &format!("{prefix}.q"), d, d)?,
        k: linear_ids(store, rng, &format!("{prefix}.k"), d, d)?,
        v: linear_ids(store, rng, &format!("{prefix}.v"), d, d)?,
        o: linear_ids(store, rng, &format!("{prefix}.o"), d, d)?,
    })
}

fn ffn_ids(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> Result<FfnIds> {
    Ok(FfnIds {
        ln: ln_ids(store, &format!("{prefix}.ln"), d)?,
        mlp: mlp_ids(store, rng, prefix, d, hidden, d)?,
    })
}

impl Model {
    /// Fresh model with Xavier-uniform weights, zero biases, and identity
    /// LayerNorms, reproducible per seed. Registration order is fixed, so
    /// checkpoints restore by name across builds.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let rng = &mut ChaCha12Rng::seed_from_u64(seed);
        let (d, hidden) = (cfg.d, cfg.ffn_hidden());

        let embed_det = mlp_ids(&mut store, rng, "embed_det", cfg.det_input_width(), d, d)?;
        let embed_edge = mlp_ids(&mut store, rng, "embed_edge", cfg.edge_input_width(), d, d)?;

        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            encoder.push(EncoderLayerIds {
                attn: attn_ids(&mut store, rng, &format!("enc{l}.attn"), d)?,
                ffn: ffn_ids(&mut store, rng, &format!("enc{l}.ffn"), d, hidden)?,
            });
        }
        let encoder_final_ln = if cfg.encoder_layers > 0 {
            Some(ln_ids(&mut store, "enc.out_ln", d)?)
        } else {
            None
        };

        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            decoder.push(DecoderLayerIds {
                self_attn: attn_ids(&mut store, rng, &format!("dec{l}.self"), d)?,
                cross_ln_q: ln_ids(&mut store, &format!("dec{l}.cross.ln_q"), d)?,
                cross_q: linear_ids(&mut store, rng, &format!("dec{l}.cross.q"), d, d)?,
                cross_k: linear_ids(&mut store, rng, &format!("dec{l}.cross.k"), d, d)?,
                cross_v: linear_ids(&mut store, rng, &format!("dec{l}.cross.v"), d, d)?,
                cross_edge_ln: ln_ids(&mut store, &format!("dec{l}.cross.edge_ln"), d)?,
                cross_wa: store.add_xavier(format!("dec{l}.cross.wa"), d, cfg.heads, rng)?,
                cross_o: linear_ids(&mut store, rng, &format!("dec{l}.cross.o"), d, d)?,
                ffn: ffn_ids(&mut store, rng, &format!("dec{l}.ffn"), d, hidden)?,
                edge_o: linear_ids(&mut store, rng, &format!("dec{l}.edge.o"), cfg.heads, d)?,
                edge_ffn: ffn_ids(&mut store, rng, &format!("dec{l}.edge.ffn"), d, hidden)?,
            });
        }
        let node_final_ln = ln_ids(&mut store, "dec.node_ln", d)?;
        let edge_final_ln = ln_ids(&mut store, "dec.edge_ln", d)?;

        let affinity = mlp_ids(&mut store, rng, "affinity", d, d, 1)?;
        let velocity = mlp_ids(&mut store, rng, "velocity", d, d, 2)?;

        let ids = ModelParams {
            embed_det,
            embed_edge,
            encoder,
            encoder_final_ln,
            decoder,
            node_final_ln,
            edge_final_ln,
            affinity,
            velocity,
        };
        Ok(Model { cfg, store, ids })
    }

    fn lnorm(&self, t: &mut Tape, x: NodeId, ids: &LnIds) -> Result<NodeId> {
        let g = t.param(&self.store, ids.gain);
        let b = t.param(&self.store, ids.bias);
        t.layer_norm(x, g, b)
    }

    fn lin(&self, t: &mut Tape, x: NodeId, ids: &LinearIds) -> Result<NodeId> {
        let w = t.param(&self.store, ids.w);
        let b = t.param(&self.store, ids.b);
        t.linear(x, w, b)
    }

    fn mlp(&self, t: &mut Tape, x: NodeId, ids: &MlpIds) -> Result<NodeId> {
        let w1 = t.param(&self.store, ids.w1);
        let b1 = t.param(&self.store, ids.b1);
        let h = t.linear(x, w1, b1)?;
        let h = t.relu(h)?;
        let w2 = t.param(&self.store, ids.w2);
        let b2 = t.param(&self.store, ids.b2);
        t.linear(h, w2, b2)
    }

    /// Raw detection rows (N, base + num_classes) to embeddings (N, d).
    pub fn embed_detections(&self, t: &mut Tape, raw: NodeId, drop: &mut Dropout) -> Result<NodeId> {
        let cols = t.value(raw).cols;
        if cols != self.cfg.det_input_width() {
            return Err(Error::shape(
                "embed_detections",
                format!("{cols} feature columns, expected {}", self.cfg.det_input_width()),
            ));
        }
        let h = self.mlp(t, raw, &self.ids.embed_det)?;
        drop.apply(t, h)
    }

    /// Raw association edge rows (E, 9) to embeddings (E, d).
    pub fn embed_edges(&self, t: &mut Tape, raw: NodeId, drop: &mut Dropout) -> Result<NodeId> {
        let cols = t.value(raw).cols;
        if cols != self.cfg.edge_input_width() {
            return Err(Error::shape(
                "embed_edges",
                format!("{cols} feature columns, expected {}", self.cfg.edge_input_width()),
            ));
        }
        let h = self.mlp(t, raw, &self.ids.embed_edge)?;
        drop.apply(t, h)
    }

    /// Multi-head attention core shared by the self and cross blocks.
    /// Queries live on dst nodes, keys and values on src nodes; `bias` is an
    /// optional (E, heads) additive logit term. Returns the aggregated dst
    /// features (n_dst, d) plus the pre-softmax logits and the normalized
    /// weights, both (E, heads) in edge order.
    fn mha_core(
        &self,
        t: &mut Tape,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        src: &[usize],
        dst: &[usize],
        n_dst: usize,
        bias: Option<NodeId>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let qe = t.row_gather(q, dst)?;
        let ke = t.row_gather(k, src)?;
        let ve = t.row_gather(v, src)?;

        let mut dots = Vec::with_capacity(heads);
        for c in 0..heads {
            let qc = t.col_slice(qe, c * dh, dh)?;
            let kc = t.col_slice(ke, c * dh, dh)?;
            let prod = t.mul(qc, kc)?;
            let dot = t.row_sum(prod)?;
            dots.push(t.mul_scalar(dot, scale)?);
        }
        let mut logits = t.concat_cols(&dots)?;
        if let Some(b) = bias {
            logits = t.add(logits, b)?;
        }
        let alpha = t.segment_softmax(logits, dst)?;

        let mut agg = Vec::with_capacity(heads);
        for c in 0..heads {
            let vc = t.col_slice(ve, c * dh, dh)?;
            let ac = t.col_slice(alpha, c, 1)?;
            let weighted = t.scale_rows(vc, ac)?;
            agg.push(t.index_add_rows(weighted, dst, n_dst)?);
        }
        Ok((t.concat_cols(&agg)?, logits, alpha))
    }

    /// Pre-LN residual self-attention over one node set.
    fn self_attention_block(
        &self,
        t: &mut Tape,
        h: NodeId,
        graph: &SparseGraph,
        ids: &AttnIds,
        drop: &mut Dropout,
    ) -> Result<NodeId> {
        let z = self.lnorm(t, h, &ids.ln)?;
        let q = self.lin(t, z, &ids.q)?;
        let k = self.lin(t, z, &ids.k)?;
        let v = self.lin(t, z, &ids.v)?;
        let src = graph.src_indices();
        let dst = graph.dst_indices();
        let (agg, _, _) = self.mha_core(t, q, k, v, &src, &dst, graph.num_dst, None)?;
        let o = self.lin(t, agg, &ids.o)?;
        let o = drop.apply(t, o)?;
        t.add(h, o)
    }

    /// Pre-LN residual feed-forward block.
    fn ffn_block(&self, t: &mut Tape, h: NodeId, ids: &FfnIds, drop: &mut Dropout) -> Result<NodeId> {
        let z = self.lnorm(t, h, &ids.ln)?;
        let f = self.mlp(t, z, &ids.mlp)?;
        let f = drop.apply(t, f)?;
        t.add(h, f)
    }

    /// Track encoder: `encoder_layers` rounds of sparse self-attention plus
    /// FFN over the track graph, then a closing LayerNorm. Attention for node
    /// i normalizes over its in-edges only; the graph must carry self-loops.
    /// An empty track set passes through untouched (first frame).
    pub fn encode_tracks(
        &self,
        t: &mut Tape,
        h: NodeId,
        graph: &SparseGraph,
        drop: &mut Dropout,
    ) -> Result<NodeId> {
        let (rows, cols) = {
            let v = t.value(h);
            (v.rows, v.cols)
        };
        if rows == 0 {
            return Ok(h);
        }
        if rows != graph.num_dst || graph.num_src != graph.num_dst {
            return Err(Error::shape(
                "encode_tracks",
                format!("{rows} feature rows on a {}x{} graph", graph.num_src, graph.num_dst),
            ));
        }
        if cols != self.cfg.d {
            return Err(Error::shape(
                "encode_tracks",
                format!("feature width {cols}, model width {}", self.cfg.d),
            ));
        }
        let mut h = h;
        for layer in &self.ids.encoder {
            h = self.self_attention_block(t, h, graph, &layer.attn, drop)?;
            h = self.ffn_block(t, h, &layer.ffn, drop)?;
        }
        if let Some(ln) = &self.ids.encoder_final_ln {
            h = self.lnorm(t, h, ln)?;
        }
        Ok(h)
    }

    /// Decoder over the detection and association graphs.
    ///
    /// Per layer: self-attention over detections on the detection graph;
    /// cross-attention where each detection attends to its candidate tracks
    /// with logits `<q, k>/sqrt(d/heads) + wa . edge`; an FFN on the node
    /// stream; then the edge stream update, which re-projects the per-head
    /// pre-softmax logits to model width and applies its own FFN. The encoder
    /// output is the key/value source for every layer. Detections without
    /// candidate edges skip the cross residual entirely. Returns the final
    /// detection features (N_D, d) and edge features (E, d).
    pub fn decode(
        &self,
        t: &mut Tape,
        h_d: NodeId,
        det_graph: &SparseGraph,
        h_enc: NodeId,
        assoc: &SparseGraph,
        h_a: NodeId,
        drop: &mut Dropout,
    ) -> Result<(NodeId, NodeId)> {
        self.decode_inner(t, h_d, det_graph, h_enc, assoc, h_a, drop, None)
    }

    /// [`Model::decode`] that additionally records per-layer cross-attention
    /// weights.
    pub fn decode_traced(
        &self,
        t: &mut Tape,
        h_d: NodeId,
        det_graph: &SparseGraph,
        h_enc: NodeId,
        assoc: &SparseGraph,
        h_a: NodeId,
        drop: &mut Dropout,
        trace: &mut DecodeTrace,
    ) -> Result<(NodeId, NodeId)> {
        self.decode_inner(t, h_d, det_graph, h_enc, assoc, h_a, drop, Some(trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_inner(
        &self,
        t: &mut Tape,
        h_d: NodeId,
        det_graph: &SparseGraph,
        h_enc: NodeId,
        assoc: &SparseGraph,
        h_a: NodeId,
        drop: &mut Dropout,
        mut trace: Option<&mut DecodeTrace>,
    ) -> Result<(NodeId, NodeId)> {
        let n_d = t.value(h_d).rows;
        let n_t = t.value(h_enc).rows;
        let n_e = t.value(h_a).rows;
        if n_d != det_graph.num_dst || det_graph.num_src != det_graph.num_dst {
            return Err(Error::shape(
                "decode",
                format!(
                    "{n_d} detection rows on a {}x{} detection graph",
                    det_graph.num_src, det_graph.num_dst
                ),
            ));
        }
        if n_t != assoc.num_src || n_d != assoc.num_dst {
            return Err(Error::shape(
                "decode",
                format!(
                    "association graph is {}x{}, features are {n_t} tracks x {n_d} detections",
                    assoc.num_src, assoc.num_dst
                ),
            ));
        }
        if n_e != assoc.num_edges() {
            return Err(Error::shape(
                "decode",
                format!("{n_e} edge feature rows for {} edges", assoc.num_edges()),
            ));
        }

        let src = assoc.src_indices();
        let dst = assoc.dst_indices();

        // 1.0 where a detection has at least one candidate track; gates the
        // cross-attention residual so edgeless detections pass unchanged.
        let mut has_edge = vec![0.0; n_d];
        for &i in &dst {
            has_edge[i] = 1.0;
        }
        let mask = t.constant(Tensor::column(&has_edge));

        debug_assert!(
            det_graph.num_edges() >= n_d,
            "detection graph must carry self-loops"
        );
        let mut h_d = h_d;
        let mut h_a = h_a;
        for layer in &self.ids.decoder {
            h_d = self.self_attention_block(t, h_d, det_graph, &layer.self_attn, drop)?;

            let zq = self.lnorm(t, h_d, &layer.cross_ln_q)?;
            let q = self.lin(t, zq, &layer.cross_q)?;
            let k = self.lin(t, h_enc, &layer.cross_k)?;
            let v = self.lin(t, h_enc, &layer.cross_v)?;
            let ze = self.lnorm(t, h_a, &layer.cross_edge_ln)?;
            let wa = t.param(&self.store, layer.cross_wa);
            let bias = t.matmul(ze, wa)?;
            let (agg, logits, alpha) =
                self.mha_core(t, q, k, v, &src, &dst, n_d, Some(bias))?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.cross_weights.push(t.value(alpha).clone());
            }
            let o = self.lin(t, agg, &layer.cross_o)?;
            let o = drop.apply(t, o)?;
            let o = t.scale_rows(o, mask)?;
            h_d = t.add(h_d, o)?;
            h_d = self.ffn_block(t, h_d, &layer.ffn, drop)?;

            let e = self.lin(t, logits, &layer.edge_o)?;
            let e = drop.apply(t, e)?;
            h_a = t.add(h_a, e)?;
            h_a = self.ffn_block(t, h_a, &layer.edge_ffn, drop)?;
        }
        let h_d = self.lnorm(t, h_d, &self.ids.node_final_ln)?;
        let h_a = self.lnorm(t, h_a, &self.ids.edge_final_ln)?;
        Ok((h_d, h_a))
    }

    /// Edge features (E, d) to association logits (E, 1); the match
    /// probability is the sigmoid of each logit.
    pub fn affinity_head(&self, t: &mut Tape, h_a: NodeId) -> Result<NodeId> {
        self.mlp(t, h_a, &self.ids.affinity)
    }

    /// Detection features (N, d) to estimated (vx, vy) in m/s, shape (N, 2).
    pub fn velocity_head(&self, t: &mut Tape, h_d: NodeId) -> Result<NodeId> {
        self.mlp(t, h_d, &self.ids.velocity)
    }
}
