//! The recorded computation tape.
//!
//! Nodes are appended in construction order, so the tape is already a
//! topological order: backward walks it once in reverse. Parameter leaves
//! are deduplicated, letting every use of a parameter accumulate into the
//! same gradient buffer.

use std::collections::HashMap;

use super::{DiffError, ParamStore, Tensor};

/// Probabilities are clamped here before any log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Param { index: usize },
    Input,
    EmbedRow { table: NodeId, row: usize },
    Add { a: NodeId, b: NodeId },
    SumList { terms: Vec<NodeId> },
    Hadamard { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Sigmoid { a: NodeId },
    Softmax { a: NodeId },
    Linear { w: NodeId, b: NodeId, x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Dot { a: NodeId, b: NodeId },
    MapEmbed { table: NodeId, cells: Vec<Vec<usize>> },
    Conv3x3 { u: NodeId, k: NodeId, mask: Option<NodeId> },
    GateMap { u: NodeId, gate: NodeId },
    MapScores { u: NodeId, e: NodeId },
    CrossEntropy { p: NodeId, target: usize },
    Mse { a: NodeId, b: NodeId },
    BernoulliLogProb { h: NodeId, bits: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-parameter gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn by_param(&self) -> &[Option<Vec<f64>>] {
        &self.by_param
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.by_param.get(index).and_then(|g| g.as_deref())
    }
}

/// A recorded forward computation over one parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Graph<'s> {
        Graph { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn shape_err(op: &'static str, detail: String) -> DiffError {
        DiffError::Shape { op, detail }
    }

    // -- leaves ------------------------------------------------------------

    /// Leaf referencing a store parameter; repeated lookups return the same
    /// node so gradients from all uses accumulate together.
    pub fn param(&mut self, name: &str) -> Result<NodeId, DiffError> {
        let index = self.store.param_index(name)?;
        if let Some(&id) = self.param_nodes.get(&index) {
            return Ok(id);
        }
        let value = self.store.param_at(index).value.clone();
        let id = self.push(Op::Param { index }, value);
        self.param_nodes.insert(index, id);
        Ok(id)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.input(Tensor::zeros(shape))
    }

    /// Copies a node's value into a fresh constant, stopping gradients.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.input(value)
    }

    // -- elementwise and vector ops ----------------------------------------

    /// Row `row` of a `[rows, dim]` table.
    pub fn embed_row(&mut self, table: NodeId, row: usize) -> Result<NodeId, DiffError> {
        let t = &self.nodes[table.0].value;
        let [rows, dim] = *t.shape() else {
            return Err(Self::shape_err("embed_row", format!("table must be 2-d, got {:?}", t.shape())));
        };
        if row >= rows {
            return Err(Self::shape_err("embed_row", format!("row {row} out of {rows}")));
        }
        let data = t.data()[row * dim..(row + 1) * dim].to_vec();
        let value = Tensor::new(vec![dim], data).expect("row slice");
        Ok(self.push(Op::EmbedRow { table, row }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("add");
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sum_list(&mut self, terms: &[NodeId]) -> Result<NodeId, DiffError> {
        let Some(first) = terms.first() else {
            return Err(Self::shape_err("sum_list", "empty term list".into()));
        };
        let shape = self.nodes[first.0].value.shape().to_vec();
        let mut data = vec![0.0; self.nodes[first.0].value.numel()];
        for &t in terms {
            let v = &self.nodes[t.0].value;
            if v.shape() != shape.as_slice() {
                return Err(Self::shape_err(
                    "sum_list",
                    format!("{:?} vs {:?}", v.shape(), shape),
                ));
            }
            for (acc, &x) in data.iter_mut().zip(v.data()) {
                *acc += x;
            }
        }
        let value = Tensor::new(shape, data).expect("sum_list");
        Ok(self.push(Op::SumList { terms: terms.to_vec() }, value))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("hadamard", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("hadamard");
        Ok(self.push(Op::Hadamard { a, b }, value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("scale");
        self.push(Op::Scale { a, factor }, value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("sigmoid");
        self.push(Op::Sigmoid { a }, value)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), softmax(ta.data())).expect("softmax");
        self.push(Op::Softmax { a }, value)
    }

    /// `w x + b` with `w: [out, in]`, `b: [out]`, `x: [in]`.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, DiffError> {
        let (tw, tb, tx) = (&self.nodes[w.0].value, &self.nodes[b.0].value, &self.nodes[x.0].value);
        let [out, inp] = *tw.shape() else {
            return Err(Self::shape_err("linear", format!("weight must be 2-d, got {:?}", tw.shape())));
        };
        if tb.shape() != [out] || tx.shape() != [inp] {
            return Err(Self::shape_err(
                "linear",
                format!("w {:?}, b {:?}, x {:?}", tw.shape(), tb.shape(), tx.shape()),
            ));
        }
        let mut data = tb.data().to_vec();
        for (o, y) in data.iter_mut().enumerate() {
            let row = &tw.data()[o * inp..(o + 1) * inp];
            *y += dot(row, tx.data());
        }
        let value = Tensor::new(vec![out], data).expect("linear");
        Ok(self.push(Op::Linear { w, b, x }, value))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 1 || tb.shape().len() != 1 {
            return Err(Self::shape_err(
                "concat",
                format!("vectors required, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::new(vec![ta.numel() + tb.numel()], data).expect("concat");
        Ok(self.push(Op::Concat { a, b }, value))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() || ta.shape().len() != 1 {
            return Err(Self::shape_err("dot", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let value = Tensor::scalar(dot(ta.data(), tb.data()));
        Ok(self.push(Op::Dot { a, b }, value))
    }

    // -- map ops -------------------------------------------------------------

    /// Builds a `[g1, g2, dim]` map embedding: each cell is the sum of the
    /// table rows listed for it (`cells` is x-major, one symbol-index list
    /// per cell).
    pub fn map_embed(
        &mut self,
        table: NodeId,
        cells: Vec<Vec<usize>>,
        g1: usize,
        g2: usize,
    ) -> Result<NodeId, DiffError> {
        let t = &self.nodes[table.0].value;
        let [rows, dim] = *t.shape() else {
            return Err(Self::shape_err("map_embed", format!("table must be 2-d, got {:?}", t.shape())));
        };
        if cells.len() != g1 * g2 {
            return Err(Self::shape_err(
                "map_embed",
                format!("expected {} cells, got {}", g1 * g2, cells.len()),
            ));
        }
        let mut data = vec![0.0; g1 * g2 * dim];
        for (c, symbols) in cells.iter().enumerate() {
            let out = &mut data[c * dim..(c + 1) * dim];
            for &s in symbols {
                if s >= rows {
                    return Err(Self::shape_err("map_embed", format!("symbol row {s} out of {rows}")));
                }
                let row = &t.data()[s * dim..(s + 1) * dim];
                axpy(out, row, 1.0);
            }
        }
        let value = Tensor::new(vec![g1, g2, dim], data).expect("map_embed");
        Ok(self.push(Op::MapEmbed { table, cells }, value))
    }

    /// Zero-padded 3x3 convolution over a `[g1, g2, cin]` map with kernel
    /// `[3, 3, cin, cout]`, optionally spatially masked by a 9-vector.
    ///
    /// Kernel matrix columns map to x and rows to y:
    /// `out[x, y] = sum_{i,j} K[i][j] * u[x+1-j, y+1-i]` (missing cells are
    /// zero), so a kernel one-hot at row 1, col 0 moves every value one
    /// column toward smaller x with zeros entering at the largest-x column.
    pub fn conv3x3(&mut self, u: NodeId, k: NodeId, mask: Option<NodeId>) -> Result<NodeId, DiffError> {
        let tu = &self.nodes[u.0].value;
        let tk = &self.nodes[k.0].value;
        let [g1, g2, cin] = *tu.shape() else {
            return Err(Self::shape_err("conv3x3", format!("map must be 3-d, got {:?}", tu.shape())));
        };
        let [kh, kw, kin, cout] = *tk.shape() else {
            return Err(Self::shape_err("conv3x3", format!("kernel must be 4-d, got {:?}", tk.shape())));
        };
        if kh != 3 || kw != 3 {
            return Err(Self::shape_err("conv3x3", format!("kernel must be 3x3, got {kh}x{kw}")));
        }
        if kin != cin {
            return Err(Self::shape_err("conv3x3", format!("kernel cin {kin} vs map {cin}")));
        }
        let mask_data: Option<&[f64]> = match mask {
            Some(m) => {
                let tm = &self.nodes[m.0].value;
                if tm.numel() != 9 {
                    return Err(Self::shape_err("conv3x3", format!("mask needs 9 entries, got {:?}", tm.shape())));
                }
                Some(tm.data())
            }
            None => None,
        };
        let value = conv_forward(tu.data(), g1, g2, cin, tk.data(), cout, mask_data);
        let value = Tensor::new(vec![g1, g2, cout], value).expect("conv3x3");
        Ok(self.push(Op::Conv3x3 { u, k, mask }, value))
    }

    /// Broadcast product along the feature axis: `out[x,y,l] = u[x,y,l] * g[l]`.
    pub fn gate_map(&mut self, u: NodeId, gate: NodeId) -> Result<NodeId, DiffError> {
        let (tu, tg) = (&self.nodes[u.0].value, &self.nodes[gate.0].value);
        let [_, _, dim] = *tu.shape() else {
            return Err(Self::shape_err("gate_map", format!("map must be 3-d, got {:?}", tu.shape())));
        };
        if tg.shape() != [dim] {
            return Err(Self::shape_err(
                "gate_map",
                format!("gate {:?} vs feature dim {dim}", tg.shape()),
            ));
        }
        let mut data = tu.data().to_vec();
        for row in data.chunks_exact_mut(dim) {
            for (x, &g) in row.iter_mut().zip(tg.data()) {
                *x *= g;
            }
        }
        let value = Tensor::new(tu.shape().to_vec(), data).expect("gate_map");
        Ok(self.push(Op::GateMap { u, gate }, value))
    }

    /// Per-cell dot products with `e`: flattens `[g1, g2, dim]` to scores
    /// `[g1 * g2]` in x-major cell order.
    pub fn map_scores(&mut self, u: NodeId, e: NodeId) -> Result<NodeId, DiffError> {
        let (tu, te) = (&self.nodes[u.0].value, &self.nodes[e.0].value);
        let [g1, g2, dim] = *tu.shape() else {
            return Err(Self::shape_err("map_scores", format!("map must be 3-d, got {:?}", tu.shape())));
        };
        if te.shape() != [dim] {
            return Err(Self::shape_err(
                "map_scores",
                format!("e {:?} vs feature dim {dim}", te.shape()),
            ));
        }
        let data: Vec<f64> =
            tu.data().chunks_exact(dim).map(|cell| dot(cell, te.data())).collect();
        let value = Tensor::new(vec![g1 * g2], data).expect("map_scores");
        Ok(self.push(Op::MapScores { u, e }, value))
    }

    // -- losses --------------------------------------------------------------

    /// `-log p[target]` with the probability clamped at [`LOG_EPS`].
    pub fn cross_entropy(&mut self, p: NodeId, target: usize) -> Result<NodeId, DiffError> {
        let tp = &self.nodes[p.0].value;
        if target >= tp.numel() {
            return Err(Self::shape_err(
                "cross_entropy",
                format!("target {target} out of {}", tp.numel()),
            ));
        }
        let value = Tensor::scalar(-(tp.data()[target].max(LOG_EPS)).ln());
        Ok(self.push(Op::CrossEntropy { p, target }, value))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mse", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = ta.numel() as f64;
        let sum: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(sum / n);
        Ok(self.push(Op::Mse { a, b }, value))
    }

    /// Log-probability of observed bits under independent Bernoullis with
    /// success probabilities `sigmoid(h)`.
    pub fn bernoulli_log_prob(&mut self, h: NodeId, bits: &[f64]) -> Result<NodeId, DiffError> {
        let th = &self.nodes[h.0].value;
        if th.numel() != bits.len() {
            return Err(Self::shape_err(
                "bernoulli_log_prob",
                format!("h has {} entries, bits {}", th.numel(), bits.len()),
            ));
        }
        let mut total = 0.0;
        for (&hi, &bi) in th.data().iter().zip(bits) {
            let p = sigmoid(hi);
            total += if bi > 0.5 { p.max(LOG_EPS).ln() } else { (1.0 - p).max(LOG_EPS).ln() };
        }
        let value = Tensor::scalar(total);
        Ok(self.push(Op::BernoulliLogProb { h, bits: bits.to_vec() }, value))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss; returns gradients per store
    /// parameter. Each tape node is visited exactly once.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let loss_t = &self.nodes[loss.0].value;
        if loss_t.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        let mut by_param: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param { index } => {
                    let slot = by_param[*index].get_or_insert_with(|| vec![0.0; gout.len()]);
                    axpy(slot, &gout, 1.0);
                }
                Op::EmbedRow { table, row } => {
                    let dim = gout.len();
                    let g = self.grad_slot(&mut grads, *table);
                    axpy(&mut g[row * dim..(row + 1) * dim], &gout, 1.0);
                }
                Op::Add { a, b } => {
                    axpy(self.grad_slot(&mut grads, *a), &gout, 1.0);
                    axpy(self.grad_slot(&mut grads, *b), &gout, 1.0);
                }
                Op::SumList { terms } => {
                    for &t in terms {
                        axpy(self.grad_slot(&mut grads, t), &gout, 1.0);
                    }
                }
                Op::Hadamard { a, b } => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    {
                        let g = self.grad_slot(&mut grads, *a);
                        for ((g, &go), &y) in g.iter_mut().zip(&gout).zip(vb) {
                            *g += go * y;
                        }
                    }
                    let g = self.grad_slot(&mut grads, *b);
                    for ((g, &go), &x) in g.iter_mut().zip(&gout).zip(va) {
                        *g += go * x;
                    }
                }
                Op::Scale { a, factor } => {
                    axpy(self.grad_slot(&mut grads, *a), &gout, *factor);
                }
                Op::Sigmoid { a } => {
                    let out = node.value.data();
                    let g = self.grad_slot(&mut grads, *a);
                    for ((g, &go), &s) in g.iter_mut().zip(&gout).zip(out) {
                        *g += go * s * (1.0 - s);
                    }
                }
                Op::Softmax { a } => {
                    let s = node.value.data();
                    let inner: f64 = gout.iter().zip(s).map(|(&go, &si)| go * si).sum();
                    let g = self.grad_slot(&mut grads, *a);
                    for ((g, &go), &si) in g.iter_mut().zip(&gout).zip(s) {
                        *g += si * (go - inner);
                    }
                }
                Op::Linear { w, b, x } => {
                    let vx = self.nodes[x.0].value.data();
                    let vw = self.nodes[w.0].value.data();
                    let inp = vx.len();
                    {
                        let gw = self.grad_slot(&mut grads, *w);
                        for (o, &go) in gout.iter().enumerate() {
                            axpy(&mut gw[o * inp..(o + 1) * inp], vx, go);
                        }
                    }
                    axpy(self.grad_slot(&mut grads, *b), &gout, 1.0);
                    let gx = self.grad_slot(&mut grads, *x);
                    for (o, &go) in gout.iter().enumerate() {
                        axpy(gx, &vw[o * inp..(o + 1) * inp], go);
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].value.numel();
                    axpy(self.grad_slot(&mut grads, *a), &gout[..na], 1.0);
                    axpy(self.grad_slot(&mut grads, *b), &gout[na..], 1.0);
                }
                Op::Dot { a, b } => {
                    let go = gout[0];
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    axpy(self.grad_slot(&mut grads, *a), vb, go);
                    axpy(self.grad_slot(&mut grads, *b), va, go);
                }
                Op::MapEmbed { table, cells } => {
                    let dim = self.nodes[table.0].value.shape()[1];
                    let g = self.grad_slot(&mut grads, *table);
                    for (c, symbols) in cells.iter().enumerate() {
                        let go = &gout[c * dim..(c + 1) * dim];
                        for &s in symbols {
                            axpy(&mut g[s * dim..(s + 1) * dim], go, 1.0);
                        }
                    }
                }
                Op::Conv3x3 { u, k, mask } => {
                    self.conv_backward(&mut grads, &gout, *u, *k, *mask);
                }
                Op::GateMap { u, gate } => {
                    let vu = self.nodes[u.0].value.data();
                    let vg = self.nodes[gate.0].value.data();
                    let dim = vg.len();
                    {
                        let g = self.grad_slot(&mut grads, *u);
                        for (row, gorow) in g.chunks_exact_mut(dim).zip(gout.chunks_exact(dim)) {
                            for ((gi, &go), &gv) in row.iter_mut().zip(gorow).zip(vg) {
                                *gi += go * gv;
                            }
                        }
                    }
                    let g = self.grad_slot(&mut grads, *gate);
                    for (urow, gorow) in vu.chunks_exact(dim).zip(gout.chunks_exact(dim)) {
                        for ((gi, &go), &uv) in g.iter_mut().zip(gorow).zip(urow) {
                            *gi += go * uv;
                        }
                    }
                }
                Op::MapScores { u, e } => {
                    let vu = self.nodes[u.0].value.data();
                    let ve = self.nodes[e.0].value.data();
                    let dim = ve.len();
                    {
                        let g = self.grad_slot(&mut grads, *u);
                        for (cell, &go) in g.chunks_exact_mut(dim).zip(&gout) {
                            axpy(cell, ve, go);
                        }
                    }
                    let g = self.grad_slot(&mut grads, *e);
                    for (urow, &go) in vu.chunks_exact(dim).zip(&gout) {
                        axpy(g, urow, go);
                    }
                }
                Op::CrossEntropy { p, target } => {
                    let pt = self.nodes[p.0].value.data()[*target].max(LOG_EPS);
                    let g = self.grad_slot(&mut grads, *p);
                    g[*target] -= gout[0] / pt;
                }
                Op::Mse { a, b } => {
                    let go = gout[0];
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let n = va.len() as f64;
                    {
                        let g = self.grad_slot(&mut grads, *a);
                        for ((g, &x), &y) in g.iter_mut().zip(va).zip(vb) {
                            *g += go * 2.0 * (x - y) / n;
                        }
                    }
                    let g = self.grad_slot(&mut grads, *b);
                    for ((g, &x), &y) in g.iter_mut().zip(va).zip(vb) {
                        *g -= go * 2.0 * (x - y) / n;
                    }
                }
                Op::BernoulliLogProb { h, bits } => {
                    let go = gout[0];
                    let vh = self.nodes[h.0].value.data();
                    let g = self.grad_slot(&mut grads, *h);
                    for ((g, &hi), &bi) in g.iter_mut().zip(vh).zip(bits) {
                        *g += go * (bi - sigmoid(hi));
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }

    /// Mutable gradient buffer for `id`, allocated on first touch.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> &'g mut [f64] {
        let numel = self.nodes[id.0].value.numel();
        grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        gout: &[f64],
        u: NodeId,
        k: NodeId,
        mask: Option<NodeId>,
    ) {
        let tu = &self.nodes[u.0].value;
        let tk = &self.nodes[k.0].value;
        let [g1, g2, cin] = *tu.shape() else { unreachable!() };
        let cout = tk.shape()[3];
        let vu = tu.data().to_vec();
        let vk = tk.data().to_vec();
        let vm: Option<Vec<f64>> = mask.map(|m| self.nodes[m.0].value.data().to_vec());

        // One sweep for dU, dK and dMask; dK goes through a local buffer
        // so only one grad slot is borrowed at a time.
        let mut dmask = [0.0f64; 9];
        let mut dk = vec![0.0; vk.len()];
        {
            let gu = self.grad_slot(grads, u);
            for x in 0..g1 {
                for y in 0..g2 {
                    let orow = &gout[(x * g2 + y) * cout..(x * g2 + y + 1) * cout];
                    for i in 0..3usize {
                        for j in 0..3usize {
                            let sx = x as i64 + 1 - j as i64;
                            let sy = y as i64 + 1 - i as i64;
                            if sx < 0 || sy < 0 || sx as usize >= g1 || sy as usize >= g2 {
                                continue;
                            }
                            let s = (sx as usize * g2 + sy as usize) * cin;
                            let phi = vm.as_ref().map_or(1.0, |m| m[i * 3 + j]);
                            let kbase = (i * 3 + j) * cin * cout;
                            let gs = &mut gu[s..s + cin];
                            let mut mgrad = 0.0;
                            for ci in 0..cin {
                                let krow = &vk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                let d = dot(krow, orow);
                                gs[ci] += phi * d;
                                mgrad += vu[s + ci] * d;
                                let w = phi * vu[s + ci];
                                if w != 0.0 {
                                    axpy(&mut dk[kbase + ci * cout..kbase + (ci + 1) * cout], orow, w);
                                }
                            }
                            dmask[i * 3 + j] += mgrad;
                        }
                    }
                }
            }
        }
        axpy(self.grad_slot(grads, k), &dk, 1.0);
        if let Some(m) = mask {
            let gm = self.grad_slot(grads, m);
            // The mask cell multiplies the whole (i, j) contribution, so
            // its gradient is the unmasked U*K*dOut sum per cell.
            for (g, d) in gm.iter_mut().zip(dmask) {
                *g += d;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `acc += s * v`
fn axpy(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

fn conv_forward(
    u: &[f64],
    g1: usize,
    g2: usize,
    cin: usize,
    k: &[f64],
    cout: usize,
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; g1 * g2 * cout];
    for x in 0..g1 {
        for y in 0..g2 {
            let orow_base = (x * g2 + y) * cout;
            for i in 0..3usize {
                for j in 0..3usize {
                    let sx = x as i64 + 1 - j as i64;
                    let sy = y as i64 + 1 - i as i64;
                    if sx < 0 || sy < 0 || sx as usize >= g1 || sy as usize >= g2 {
                        continue;
                    }
                    let phi = mask.map_or(1.0, |m| m[i * 3 + j]);
                    if phi == 0.0 {
                        continue;
                    }
                    let s = (sx as usize * g2 + sy as usize) * cin;
                    let kbase = (i * 3 + j) * cin * cout;
                    let orow = &mut out[orow_base..orow_base + cout];
                    for ci in 0..cin {
                        let w = phi * u[s + ci];
                        if w != 0.0 {
                            axpy(orow, &k[kbase + ci * cout..kbase + (ci + 1) * cout], w);
                        }
                    }
                }
            }
        }
    }
    out
}
