//! Operation tape and reverse-mode gradient propagation.

use std::collections::HashMap;

use super::params::{GradMap, ParamId, ParamStore};
use super::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant input; gradients stop here.
    Leaf,
    /// Learnable leaf; backward adds into the gradient map under this id.
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    /// x @ w + b with b broadcast across rows.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Powf(NodeId, f64),
    /// Elementwise Huber on the input treated as an error term:
    /// 0.5 x^2 / beta inside the corridor, |x| - 0.5 beta outside.
    Huber(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    RowGather { src: NodeId, idx: Vec<usize> },
    /// out[idx[i]] += src[i] over rows; out starts as zeros(out_rows, cols).
    IndexAddRows { src: NodeId, idx: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor, invstd: Vec<f64> },
    Dropout { x: NodeId, mask: Vec<f64> },
    /// Per-column softmax over row groups given by `segments`.
    SegmentSoftmax { x: NodeId, segments: Vec<usize> },
    /// x (n,d) scaled row-wise by s (n,1).
    ScaleRows { x: NodeId, s: NodeId },
    RowSum(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    ColSlice { x: NodeId, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of operations. Operands always precede results, so one
/// reverse sweep visits every op after all of its consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, opcode: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op: opcode });
        Ok(id)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id.0].value;
        (t.rows, t.cols)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Leaf });
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Tracked leaf for a parameter; memoized so repeated uses within one
    /// tape share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id.0) {
            return n;
        }
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node { value: store.get(id).value.clone(), op: Op::Param(id) });
        self.param_nodes.insert(id.0, node);
        node
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        opcode: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", ta.rows, ta.cols, tb.rows, tb.cols),
            ));
        }
        let data = ta.data.iter().zip(tb.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(op, value, opcode)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|&x| x + s).collect(),
        };
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|&x| x * s).collect(),
        };
        self.push("mul_scalar", value, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul_scalar(a, -1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols != tb.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} @ {}x{}", ta.rows, ta.cols, tb.rows, tb.cols),
            ));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        mm_nn(ta, tb, &mut out);
        self.push("matmul", out, Op::Matmul(a, b))
    }

    /// x (n, in) @ w (in, out) + b (1, out) broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if tx.cols != tw.rows || tb.rows != 1 || tb.cols != tw.cols {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {}x{}, w {}x{}, b {}x{}",
                    tx.rows, tx.cols, tw.rows, tw.cols, tb.rows, tb.cols
                ),
            ));
        }
        let mut out = Tensor::zeros(tx.rows, tw.cols);
        mm_nn(tx, tw, &mut out);
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            for (o, &bv) in row.iter_mut().zip(tb.data.iter()) {
                *o += bv;
            }
        }
        self.push("linear", out, Op::Linear { x, w, b })
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        opcode: Op,
    ) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value =
            Tensor { rows: ta.rows, cols: ta.cols, data: ta.data.iter().map(|&x| f(x)).collect() };
        self.push(op, value, opcode)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    /// log(sigmoid(x)) in a form that never overflows.
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(
            "log_sigmoid",
            a,
            |x| x.min(0.0) - (-x.abs()).exp().ln_1p(),
            Op::LogSigmoid(a),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.unary("powf", a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// Elementwise Huber penalty of an error tensor.
    pub fn huber(&mut self, a: NodeId, beta: f64) -> Result<NodeId> {
        debug_assert!(beta > 0.0);
        self.unary(
            "huber",
            a,
            |x| {
                if x.abs() < beta {
                    0.5 * x * x / beta
                } else {
                    x.abs() - 0.5 * beta
                }
            },
            Op::Huber(a, beta),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts"));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::shape("concat_rows", format!("cols {c} vs {cols}")));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        self.push("concat_rows", Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::shape("concat_cols", format!("rows {r} vs {rows}")));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                data.extend_from_slice(t.row(r));
            }
        }
        self.push("concat_cols", Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()))
    }

    /// out[i] = src[idx[i]]. Duplicate indices are fine.
    pub fn row_gather(&mut self, src: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[src.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows) {
            return Err(Error::shape("row_gather", format!("index {bad} >= {} rows", t.rows)));
        }
        let cols = t.cols;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            "row_gather",
            Tensor { rows: idx.len(), cols, data },
            Op::RowGather { src, idx: idx.to_vec() },
        )
    }

    /// Scatter-add rows of src into a fresh zeros(out_rows, cols) tensor.
    pub fn index_add_rows(&mut self, src: NodeId, idx: &[usize], out_rows: usize) -> Result<NodeId> {
        let t = &self.nodes[src.0].value;
        if idx.len() != t.rows {
            return Err(Error::shape(
                "index_add_rows",
                format!("{} indices for {} rows", idx.len(), t.rows),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::shape("index_add_rows", format!("index {bad} >= {out_rows}")));
        }
        let cols = t.cols;
        let mut out = Tensor::zeros(out_rows, cols);
        for (r, &dst) in idx.iter().enumerate() {
            let src_row = t.row(r);
            let dst_row = &mut out.data[dst * cols..(dst + 1) * cols];
            for (o, &v) in dst_row.iter_mut().zip(src_row.iter()) {
                *o += v;
            }
        }
        self.push("index_add_rows", out, Op::IndexAddRows { src, idx: idx.to_vec() })
    }

    /// Row-wise normalization with learned gain and bias, epsilon 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = tx.cols;
        if tg.rows != 1 || tg.cols != d || tb.rows != 1 || tb.cols != d {
            return Err(Error::shape(
                "layer_norm",
                format!("x cols {d}, gain {}x{}, bias {}x{}", tg.rows, tg.cols, tb.rows, tb.cols),
            ));
        }
        let mut xhat = Tensor::zeros(tx.rows, d);
        let mut invstd = Vec::with_capacity(tx.rows);
        let mut out = Tensor::zeros(tx.rows, d);
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            invstd.push(is);
            let xh = xhat.row_mut(r);
            let o = &mut out.data[r * d..(r + 1) * d];
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xh[j] = h;
                o[j] = tg.data[j] * h + tb.data[j];
            }
        }
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, invstd })
    }

    /// Inverted dropout: kept entries scale by 1/(1-rate). Identity when
    /// `train` is false or rate is 0. The mask is a pure function of `key`
    /// and the element index.
    pub fn dropout(&mut self, x: NodeId, rate: f64, key: u64, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let tx = &self.nodes[x.0].value;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..tx.len())
            .map(|i| {
                let bits = splitmix64(key ^ (i as u64).wrapping_mul(0xD1342543DE82EF95));
                let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
                if u < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let value = Tensor {
            rows: tx.rows,
            cols: tx.cols,
            data: tx.data.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect(),
        };
        self.push("dropout", value, Op::Dropout { x, mask })
    }

    /// Per-column softmax over row groups. `segments[r]` names the group of
    /// row r; normalization runs within each group independently, with the
    /// group max subtracted before exponentiation.
    pub fn segment_softmax(&mut self, x: NodeId, segments: &[usize]) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if segments.len() != tx.rows {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} segment ids for {} rows", segments.len(), tx.rows),
            ));
        }
        let value = segment_softmax_forward(tx, segments);
        self.push(
            "segment_softmax",
            value,
            Op::SegmentSoftmax { x, segments: segments.to_vec() },
        )
    }

    /// x (n, d) with every row r scaled by s[r, 0].
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if ts.rows != tx.rows || ts.cols != 1 {
            return Err(Error::shape(
                "scale_rows",
                format!("x {}x{}, s {}x{}", tx.rows, tx.cols, ts.rows, ts.cols),
            ));
        }
        let mut out = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            let sv = ts.data[r];
            let src = tx.row(r);
            let dst = &mut out.data[r * tx.cols..(r + 1) * tx.cols];
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = v * sv;
            }
        }
        self.push("scale_rows", out, Op::ScaleRows { x, s })
    }

    /// (n, d) -> (n, 1) sum along each row.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = (0..tx.rows).map(|r| tx.row(r).iter().sum()).collect();
        self.push("row_sum", Tensor { rows: tx.rows, cols: 1, data }, Op::RowSum(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Columns [start, start+len) of x.
    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if start + len > tx.cols {
            return Err(Error::shape(
                "col_slice",
                format!("[{start}, {}) of {} cols", start + len, tx.cols),
            ));
        }
        let mut data = Vec::with_capacity(tx.rows * len);
        for r in 0..tx.rows {
            let row = tx.row(r);
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push(
            "col_slice",
            Tensor { rows: tx.rows, cols: len, data },
            Op::ColSlice { x, start },
        )
    }

    /// Reverse sweep from a scalar loss. Gradients of every parameter leaf
    /// reached from the loss are added into `out`; the tape is cleared
    /// afterwards and its node handles become invalid.
    pub fn backward(&mut self, loss: NodeId, out: &mut GradMap) -> Result<()> {
        {
            let t = &self.nodes[loss.0].value;
            if t.rows != 1 || t.cols != 1 {
                return Err(Error::shape(
                    "backward",
                    format!("loss is {}x{}, expected 1x1", t.rows, t.cols),
                ));
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            // Split borrows: the node being visited vs the gradient slots of
            // its (strictly earlier) operands.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => out.add(*pid, &gy),
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &gy);
                    accumulate(&mut grads, b.0, &gy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, &gy);
                    let mut neg = gy.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut grads, b.0, &neg);
                }
                Op::Mul(a, b) => {
                    let (ia, ib) = (a.0, b.0);
                    let ga = elementwise_mul(&gy, &self.nodes[ib].value);
                    let gb = elementwise_mul(&gy, &self.nodes[ia].value);
                    accumulate(&mut grads, ia, &ga);
                    accumulate(&mut grads, ib, &gb);
                }
                Op::AddScalar(a) => accumulate(&mut grads, a.0, &gy),
                Op::MulScalar(a, s) => {
                    let mut g = gy.clone();
                    g.scale_assign(*s);
                    accumulate(&mut grads, a.0, &g);
                }
                Op::Matmul(a, b) => {
                    let (ia, ib) = (a.0, b.0);
                    let ta = &self.nodes[ia].value;
                    let tb = &self.nodes[ib].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    mm_nt(&gy, tb, &mut ga);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    mm_tn(ta, &gy, &mut gb);
                    accumulate(&mut grads, ia, &ga);
                    accumulate(&mut grads, ib, &gb);
                }
                Op::Linear { x, w, b } => {
                    let (ix, iw, ib) = (x.0, w.0, b.0);
                    let tx = &self.nodes[ix].value;
                    let tw = &self.nodes[iw].value;
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    mm_nt(&gy, tw, &mut gx);
                    let mut gw = Tensor::zeros(tw.rows, tw.cols);
                    mm_tn(tx, &gy, &mut gw);
                    let mut gb = Tensor::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, &v) in gb.data.iter_mut().zip(gy.row(r).iter()) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, ix, &gx);
                    accumulate(&mut grads, iw, &gw);
                    accumulate(&mut grads, ib, &gb);
                }
                Op::Relu(a) => {
                    let ia = a.0;
                    let tx = &self.nodes[ia].value;
                    let g = map2(&gy, tx, |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, ia, &g);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let g = map2(&gy, y, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, a.0, &g);
                }
                Op::LogSigmoid(a) => {
                    let ia = a.0;
                    let tx = &self.nodes[ia].value;
                    let g = map2(&gy, tx, |g, x| g * stable_sigmoid(-x));
                    accumulate(&mut grads, ia, &g);
                }
                Op::Exp(a) => {
                    let g = map2(&gy, &node.value, |g, y| g * y);
                    accumulate(&mut grads, a.0, &g);
                }
                Op::Log(a) => {
                    let ia = a.0;
                    let tx = &self.nodes[ia].value;
                    let g = map2(&gy, tx, |g, x| g / x);
                    accumulate(&mut grads, ia, &g);
                }
                Op::Powf(a, p) => {
                    let ia = a.0;
                    let tx = &self.nodes[ia].value;
                    let p = *p;
                    let g = map2(&gy, tx, |g, x| g * p * x.powf(p - 1.0));
                    accumulate(&mut grads, ia, &g);
                }
                Op::Huber(a, beta) => {
                    let ia = a.0;
                    let tx = &self.nodes[ia].value;
                    let beta = *beta;
                    let g = map2(&gy, tx, |g, x| g * (x / beta).clamp(-1.0, 1.0));
                    accumulate(&mut grads, ia, &g);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut row = 0;
                    for p in parts {
                        let (r, c) = self.shape(p);
                        let slice = Tensor {
                            rows: r,
                            cols: c,
                            data: gy.data[row * c..(row + r) * c].to_vec(),
                        };
                        accumulate(&mut grads, p.0, &slice);
                        row += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = gy.rows;
                    let mut col = 0;
                    for p in parts {
                        let (_, c) = self.shape(p);
                        let mut slice = Tensor::zeros(rows, c);
                        for r in 0..rows {
                            let src = &gy.row(r)[col..col + c];
                            slice.row_mut(r).copy_from_slice(src);
                        }
                        accumulate(&mut grads, p.0, &slice);
                        col += c;
                    }
                }
                Op::RowGather { src, idx } => {
                    let isrc = src.0;
                    let (rows, cols) = self.shape(*src);
                    let mut g = Tensor::zeros(rows, cols);
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut g.data[i * cols..(i + 1) * cols];
                        for (o, &v) in dst.iter_mut().zip(gy.row(r).iter()) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, isrc, &g);
                }
                Op::IndexAddRows { src, idx } => {
                    let isrc = src.0;
                    let (rows, cols) = self.shape(*src);
                    let mut g = Tensor::zeros(rows, cols);
                    for (r, &i) in idx.iter().enumerate() {
                        g.row_mut(r).copy_from_slice(&gy.row(i)[..cols]);
                    }
                    accumulate(&mut grads, isrc, &g);
                }
                Op::LayerNorm { x, gain, bias, xhat, invstd } => {
                    let (ix, ig, ibias) = (x.0, gain.0, bias.0);
                    let tg = &self.nodes[ig].value;
                    let d = xhat.cols;
                    let mut gx = Tensor::zeros(xhat.rows, d);
                    let mut ggain = Tensor::zeros(1, d);
                    let mut gbias = Tensor::zeros(1, d);
                    for r in 0..xhat.rows {
                        let gyr = gy.row(r);
                        let xh = xhat.row(r);
                        let is = invstd[r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxhat = gyr[j] * tg.data[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xh[j];
                            ggain.data[j] += gyr[j] * xh[j];
                            gbias.data[j] += gyr[j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        let gxr = gx.row_mut(r);
                        for j in 0..d {
                            let dxhat = gyr[j] * tg.data[j];
                            gxr[j] = is * (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, ix, &gx);
                    accumulate(&mut grads, ig, &ggain);
                    accumulate(&mut grads, ibias, &gbias);
                }
                Op::Dropout { x, mask } => {
                    let g = Tensor {
                        rows: gy.rows,
                        cols: gy.cols,
                        data: gy.data.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect(),
                    };
                    accumulate(&mut grads, x.0, &g);
                }
                Op::SegmentSoftmax { x, segments } => {
                    let y = &node.value;
                    let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let cols = y.cols;
                    // Per (segment, column) dot of y and incoming gradient.
                    let mut dots = vec![0.0; nseg * cols];
                    for (r, &s) in segments.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let drow = &mut dots[s * cols..(s + 1) * cols];
                        for j in 0..cols {
                            drow[j] += yr[j] * gr[j];
                        }
                    }
                    let mut g = Tensor::zeros(y.rows, cols);
                    for (r, &s) in segments.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let drow = &dots[s * cols..(s + 1) * cols];
                        let out_row = g.row_mut(r);
                        for j in 0..cols {
                            out_row[j] = yr[j] * (gr[j] - drow[j]);
                        }
                    }
                    accumulate(&mut grads, x.0, &g);
                }
                Op::ScaleRows { x, s } => {
                    let (ix, is) = (x.0, s.0);
                    let tx = &self.nodes[ix].value;
                    let ts = &self.nodes[is].value;
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    let mut gs = Tensor::zeros(tx.rows, 1);
                    for r in 0..tx.rows {
                        let sv = ts.data[r];
                        let gyr = gy.row(r);
                        let xr = tx.row(r);
                        let gxr = gx.row_mut(r);
                        let mut acc = 0.0;
                        for j in 0..tx.cols {
                            gxr[j] = gyr[j] * sv;
                            acc += gyr[j] * xr[j];
                        }
                        gs.data[r] = acc;
                    }
                    accumulate(&mut grads, ix, &gx);
                    accumulate(&mut grads, is, &gs);
                }
                Op::RowSum(a) => {
                    let ia = a.0;
                    let (rows, cols) = self.shape(*a);
                    let mut g = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gv = gy.data[r];
                        for v in g.row_mut(r) {
                            *v = gv;
                        }
                    }
                    accumulate(&mut grads, ia, &g);
                }
                Op::SumAll(a) => {
                    let ia = a.0;
                    let (rows, cols) = self.shape(*a);
                    let g = Tensor::filled(rows, cols, gy.item());
                    accumulate(&mut grads, ia, &g);
                }
                Op::MeanAll(a) => {
                    let ia = a.0;
                    let (rows, cols) = self.shape(*a);
                    let g = Tensor::filled(rows, cols, gy.item() / (rows * cols) as f64);
                    accumulate(&mut grads, ia, &g);
                }
                Op::ColSlice { x, start } => {
                    let (ix, start) = (x.0, *start);
                    let (rows, cols) = self.shape(*x);
                    let mut g = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let dst = &mut g.row_mut(r)[start..start + gy.cols];
                        dst.copy_from_slice(gy.row(r));
                    }
                    accumulate(&mut grads, ix, &g);
                }
            }
        }

        self.clear();
        Ok(())
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn segment_softmax_forward(x: &Tensor, segments: &[usize]) -> Tensor {
    let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
    let cols = x.cols;
    let mut maxes = vec![f64::NEG_INFINITY; nseg * cols];
    for (r, &s) in segments.iter().enumerate() {
        let row = x.row(r);
        let mrow = &mut maxes[s * cols..(s + 1) * cols];
        for j in 0..cols {
            if row[j] > mrow[j] {
                mrow[j] = row[j];
            }
        }
    }
    let mut out = Tensor::zeros(x.rows, cols);
    let mut sums = vec![0.0; nseg * cols];
    for (r, &s) in segments.iter().enumerate() {
        let row = x.row(r);
        let mrow = &maxes[s * cols..(s + 1) * cols];
        let srow = &mut sums[s * cols..(s + 1) * cols];
        let orow = out.row_mut(r);
        for j in 0..cols {
            let e = (row[j] - mrow[j]).exp();
            orow[j] = e;
            srow[j] += e;
        }
    }
    for (r, &s) in segments.iter().enumerate() {
        let srow = &sums[s * cols..(s + 1) * cols];
        let orow = out.row_mut(r);
        for j in 0..cols {
            orow[j] /= srow[j];
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: &Tensor) {
    match &mut grads[idx] {
        Some(t) => t.add_assign(delta),
        slot => *slot = Some(delta.clone()),
    }
}

fn elementwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.same_shape(b));
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect(),
    }
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert!(a.same_shape(b));
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect(),
    }
}
