//! Eager reverse-mode tape.
//!
//! Ops execute immediately and record themselves as nodes; `backward` walks
//! the tape in reverse. A node's creation index is a topological order by
//! construction, so no sorting is needed.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Const,
    MatMul,
    MatVec,
    Conv2d { stride: usize, pad: usize },
    Relu,
    GlobalAvgPool,
    Softmax,
    Concat,
    Scale,
    ScalarMul(f64),
    Add,
    Sum,
    Gather(usize),
    CrossEntropy(usize),
    RoiPool,
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::MatMul => "matmul",
            Op::MatVec => "matvec",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Softmax => "softmax",
            Op::Concat => "concat",
            Op::Scale => "scale",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Add => "add",
            Op::Sum => "sum",
            Op::Gather(_) => "gather",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::RoiPool => "roi_pool",
            Op::Reshape => "reshape",
        }
    }
}

/// Inclusive-exclusive cell window on a feature map, in feature-map cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellWindow {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Conv { col: Vec<f64> },
    RoiPool { argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    label: Option<String>,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    aux: Aux,
}

/// Eagerly evaluated compute tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node_desc(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        match &n.label {
            Some(l) => format!("n{}({} \"{}\")", id.0, n.op.name(), l),
            None => format!("n{}({})", id.0, n.op.name()),
        }
    }

    fn push(
        &mut self,
        op: Op,
        label: Option<String>,
        inputs: Vec<NodeId>,
        value: Tensor,
        aux: Aux,
    ) -> Result<NodeId, DiffError> {
        let needs_grad = matches!(op, Op::Param)
            || inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            label,
            inputs,
            value,
            grad: None,
            needs_grad,
            aux,
        });
        if !self.nodes[id.0].value.is_finite() {
            return Err(DiffError::NonFinite {
                node: self.node_desc(id),
            });
        }
        Ok(id)
    }

    fn shape_err(&self, op: &Op, msg: String) -> DiffError {
        DiffError::ShapeMismatch {
            node: format!("n{}({})", self.nodes.len(), op.name()),
            msg,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Named leaf with no gradient.
    pub fn input(&mut self, label: &str, value: Tensor) -> Result<NodeId, DiffError> {
        self.push(Op::Input, Some(label.to_string()), vec![], value, Aux::None)
    }

    /// Named leaf that accumulates gradient.
    pub fn param(&mut self, label: &str, value: Tensor) -> Result<NodeId, DiffError> {
        self.push(Op::Param, Some(label.to_string()), vec![], value, Aux::None)
    }

    /// Unnamed leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, DiffError> {
        self.push(Op::Const, None, vec![], value, Aux::None)
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err(&Op::MatMul, format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            Op::MatMul,
            None,
            vec![a, b],
            Tensor::from_parts(vec![m, n], data),
            Aux::None,
        )
    }

    /// [m,n] x [n] -> [m]
    pub fn matvec(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId, DiffError> {
        let (sm, sv) = (self.value(mat).shape(), self.value(vec).shape());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(self.shape_err(&Op::MatVec, format!("{sm:?} x {sv:?}")));
        }
        let (m, n) = (sm[0], sm[1]);
        let md = self.value(mat).data();
        let vd = self.value(vec).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &md[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (&a, &b) in row.iter().zip(vd) {
                acc += a * b;
            }
            out[i] = acc;
        }
        self.push(
            Op::MatVec,
            None,
            vec![mat, vec],
            Tensor::from_parts(vec![m], out),
            Aux::None,
        )
    }

    /// x[C,H,W] conv w[OC,C,K,K] + b[OC] -> [OC,OH,OW]
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, DiffError> {
        let op = Op::Conv2d { stride, pad };
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(self.shape_err(&op, format!("x{sx:?} w{sw:?} b{sb:?}")));
        }
        let (c, h, width) = (sx[0], sx[1], sx[2]);
        let (oc, ic, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ic != c || kh != kw || sb[0] != oc {
            return Err(self.shape_err(&op, format!("x{sx:?} w{sw:?} b{sb:?}")));
        }
        let k = kh;
        if h + 2 * pad < k || width + 2 * pad < k || stride == 0 {
            return Err(self.shape_err(&op, format!("kernel {k} over {h}x{width} pad {pad}")));
        }
        let oh = kernels::conv_out_dim(h, k, stride, pad);
        let ow = kernels::conv_out_dim(width, k, stride, pad);
        let col = kernels::im2col(self.value(x).data(), c, h, width, k, stride, pad);
        let mut out = kernels::matmul(self.value(w).data(), &col, oc, c * k * k, oh * ow);
        let bd = self.value(b).data().to_vec();
        for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
            for v in chunk.iter_mut() {
                *v += bd[i];
            }
        }
        self.push(
            op,
            None,
            vec![x, w, b],
            Tensor::from_parts(vec![oc, oh, ow], out),
            Aux::Conv { col },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        );
        self.push(Op::Relu, None, vec![x], out, Aux::None)
    }

    /// [C,H,W] -> [C], per-channel spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(self.shape_err(&Op::GlobalAvgPool, format!("{s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = self.value(x).data();
        let out: Vec<f64> = (0..c)
            .map(|i| d[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(
            Op::GlobalAvgPool,
            None,
            vec![x],
            Tensor::from_parts(vec![c], out),
            Aux::None,
        )
    }

    /// Softmax over a 1-D vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 1 {
            return Err(self.shape_err(&Op::Softmax, format!("{s:?}")));
        }
        let out = kernels::softmax(self.value(x).data());
        self.push(
            Op::Softmax,
            None,
            vec![x],
            Tensor::from_parts(s, out),
            Aux::None,
        )
    }

    /// Concatenates 1-D vectors in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(self.shape_err(&Op::Concat, "no inputs".to_string()));
        }
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(self.shape_err(&Op::Concat, format!("{:?}", v.shape())));
            }
            out.extend_from_slice(v.data());
        }
        let n = out.len();
        self.push(
            Op::Concat,
            None,
            parts.to_vec(),
            Tensor::from_parts(vec![n], out),
            Aux::None,
        )
    }

    /// Scalar node [1] times a tensor, elementwise.
    pub fn scale(&mut self, s: NodeId, x: NodeId) -> Result<NodeId, DiffError> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err(&Op::Scale, format!("{:?}", self.value(s).shape())));
        }
        let sv = self.value(s).item();
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| sv * a).collect(),
        );
        self.push(Op::Scale, None, vec![s, x], out, Aux::None)
    }

    /// Multiply by a compile-time constant.
    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| c * a).collect(),
        );
        self.push(Op::ScalarMul(c), None, vec![x], out, Aux::None)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(
                &Op::Add,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        self.push(Op::Add, None, vec![a, b], out, Aux::None)
    }

    /// Sum-reduce to a scalar [1].
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(
            Op::Sum,
            None,
            vec![x],
            Tensor::scalar(total),
            Aux::None,
        )
    }

    /// Extracts element `index` of a vector as a [1] tensor.
    pub fn gather(&mut self, x: NodeId, index: usize) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        if v.shape().len() != 1 || index >= v.len() {
            return Err(self.shape_err(
                &Op::Gather(index),
                format!("index {index} into {:?}", v.shape()),
            ));
        }
        let out = Tensor::scalar(v.data()[index]);
        self.push(Op::Gather(index), None, vec![x], out, Aux::None)
    }

    /// Cross-entropy of softmax(logits) at an integer label, fused for stability.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId, DiffError> {
        let v = self.value(logits);
        if v.shape().len() != 1 {
            return Err(self.shape_err(
                &Op::CrossEntropy(label),
                format!("{:?}", v.shape()),
            ));
        }
        if label >= v.len() {
            return Err(DiffError::LabelOutOfRange {
                label,
                classes: v.len(),
            });
        }
        let loss = kernels::log_sum_exp(v.data()) - v.data()[label];
        self.push(
            Op::CrossEntropy(label),
            None,
            vec![logits],
            Tensor::scalar(loss),
            Aux::None,
        )
    }

    /// Binned max pool over a cell window of a [C,H,W] map; output is
    /// flattened channel-major to [C*bins*bins].
    pub fn roi_pool_cells(
        &mut self,
        map: NodeId,
        window: CellWindow,
        bins: usize,
    ) -> Result<NodeId, DiffError> {
        let op = Op::RoiPool;
        let s = self.value(map).shape().to_vec();
        if s.len() != 3 || bins == 0 {
            return Err(self.shape_err(&op, format!("map {s:?} bins {bins}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if window.x0 >= window.x1 || window.y0 >= window.y1 || window.x1 > w || window.y1 > h {
            return Err(self.shape_err(&op, format!("window {window:?} on {h}x{w}")));
        }
        let (bw, bh) = (window.x1 - window.x0, window.y1 - window.y0);
        let d = self.value(map).data();
        let mut out = vec![0.0; c * bins * bins];
        let mut argmax = vec![0usize; c * bins * bins];
        for ch in 0..c {
            for by in 0..bins {
                // Sub-window ranges may repeat cells when the window is
                // smaller than the bin grid.
                let y_start = window.y0 + by * bh / bins;
                let y_end = (window.y0 + ((by + 1) * bh).div_ceil(bins)).max(y_start + 1);
                for bx in 0..bins {
                    let x_start = window.x0 + bx * bw / bins;
                    let x_end = (window.x0 + ((bx + 1) * bw).div_ceil(bins)).max(x_start + 1);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for y in y_start..y_end.min(h) {
                        for x in x_start..x_end.min(w) {
                            let idx = (ch * h + y) * w + x;
                            if d[idx] > best {
                                best = d[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * bins + by) * bins + bx;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.push(
            op,
            None,
            vec![map],
            Tensor::from_parts(vec![c * bins * bins], out),
            Aux::RoiPool { argmax },
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let out = self.value(x).reshaped(shape.to_vec()).map_err(|_| {
            self.shape_err(
                &Op::Reshape,
                format!("{:?} -> {shape:?}", self.value(x).shape()),
            )
        })?;
        self.push(Op::Reshape, None, vec![x], out, Aux::None)
    }

    /// Reverse pass from a scalar loss node. Accumulators are reallocated on
    /// every call, so repeated calls recompute rather than accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::LossNotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let inputs = self.nodes[id].inputs.clone();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Input | Op::Param | Op::Const => {}
                Op::MatMul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let (m, k) = {
                        let s = self.nodes[a.0].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b.0].value.shape()[1];
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_abt_acc(
                            g.data(),
                            self.nodes[b.0].value.data(),
                            &mut da,
                            m,
                            n,
                            k,
                        );
                        accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], da));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_atb_acc(
                            self.nodes[a.0].value.data(),
                            g.data(),
                            &mut db,
                            k,
                            m,
                            n,
                        );
                        accumulate(&mut grads[b.0], Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::MatVec => {
                    let (mat, vecn) = (inputs[0], inputs[1]);
                    let s = self.nodes[mat.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    if self.nodes[mat.0].needs_grad {
                        let x = self.nodes[vecn.0].value.data();
                        let mut dm = vec![0.0; m * n];
                        for i in 0..m {
                            let gi = g.data()[i];
                            let row = &mut dm[i * n..(i + 1) * n];
                            for (r, &xj) in row.iter_mut().zip(x) {
                                *r = gi * xj;
                            }
                        }
                        accumulate(&mut grads[mat.0], Tensor::from_parts(vec![m, n], dm));
                    }
                    if self.nodes[vecn.0].needs_grad {
                        let md = self.nodes[mat.0].value.data();
                        let mut dx = vec![0.0; n];
                        for i in 0..m {
                            let gi = g.data()[i];
                            let row = &md[i * n..(i + 1) * n];
                            for (d, &mij) in dx.iter_mut().zip(row) {
                                *d += gi * mij;
                            }
                        }
                        accumulate(&mut grads[vecn.0], Tensor::from_parts(vec![n], dx));
                    }
                }
                Op::Conv2d { stride, pad } => {
                    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    let sw = self.nodes[w.0].value.shape().to_vec();
                    let (c, h, width) = (sx[0], sx[1], sx[2]);
                    let (oc, k) = (sw[0], sw[2]);
                    let ohw = g.len() / oc;
                    let col = match &self.nodes[id].aux {
                        Aux::Conv { col } => col,
                        _ => unreachable!("conv node without col cache"),
                    };
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; oc * c * k * k];
                        kernels::matmul_abt_acc(g.data(), col, &mut dw, oc, ohw, c * k * k);
                        accumulate(
                            &mut grads[w.0],
                            Tensor::from_parts(vec![oc, c, k, k], dw),
                        );
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> = g
                            .data()
                            .chunks(ohw)
                            .map(|ch| ch.iter().sum::<f64>())
                            .collect();
                        accumulate(&mut grads[b.0], Tensor::from_parts(vec![oc], db));
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dcol = vec![0.0; c * k * k * ohw];
                        kernels::matmul_atb_acc(
                            self.nodes[w.0].value.data(),
                            g.data(),
                            &mut dcol,
                            c * k * k,
                            oc,
                            ohw,
                        );
                        let mut dx = vec![0.0; c * h * width];
                        kernels::col2im_acc(&dcol, c, h, width, k, stride, pad, &mut dx);
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(vec![c, h, width], dx),
                        );
                    }
                }
                Op::Relu => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let xv = self.nodes[x.0].value.data();
                        let dx: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect();
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(self.nodes[x.0].value.shape().to_vec(), dx),
                        );
                    }
                }
                Op::GlobalAvgPool => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let s = self.nodes[x.0].value.shape().to_vec();
                        let hw = s[1] * s[2];
                        let mut dx = vec![0.0; s.iter().product()];
                        for (c, &gc) in g.data().iter().enumerate() {
                            let v = gc / hw as f64;
                            for d in &mut dx[c * hw..(c + 1) * hw] {
                                *d = v;
                            }
                        }
                        accumulate(&mut grads[x.0], Tensor::from_parts(s, dx));
                    }
                }
                Op::Softmax => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let y = self.nodes[id].value.data();
                        let dot: f64 = g.data().iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                        let dx: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(y)
                            .map(|(&gi, &yi)| yi * (gi - dot))
                            .collect();
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(vec![dx.len()], dx),
                        );
                    }
                }
                Op::Concat => {
                    let mut offset = 0usize;
                    for &p in &inputs {
                        let len = self.nodes[p.0].value.len();
                        if self.nodes[p.0].needs_grad {
                            let part = g.data()[offset..offset + len].to_vec();
                            accumulate(&mut grads[p.0], Tensor::from_parts(vec![len], part));
                        }
                        offset += len;
                    }
                }
                Op::Scale => {
                    let (s, x) = (inputs[0], inputs[1]);
                    if self.nodes[s.0].needs_grad {
                        let xv = self.nodes[x.0].value.data();
                        let ds: f64 = g.data().iter().zip(xv).map(|(&gi, &xi)| gi * xi).sum();
                        accumulate(&mut grads[s.0], Tensor::scalar(ds));
                    }
                    if self.nodes[x.0].needs_grad {
                        let sv = self.nodes[s.0].value.item();
                        let dx: Vec<f64> = g.data().iter().map(|&gi| sv * gi).collect();
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(self.nodes[x.0].value.shape().to_vec(), dx),
                        );
                    }
                }
                Op::ScalarMul(c) => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let dx: Vec<f64> = g.data().iter().map(|&gi| c * gi).collect();
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(self.nodes[x.0].value.shape().to_vec(), dx),
                        );
                    }
                }
                Op::Add => {
                    for &p in &inputs {
                        if self.nodes[p.0].needs_grad {
                            accumulate(&mut grads[p.0], g.clone());
                        }
                    }
                }
                Op::Sum => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let s = self.nodes[x.0].value.shape().to_vec();
                        accumulate(&mut grads[x.0], Tensor::full(&s, g.item()));
                    }
                }
                Op::Gather(index) => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                        dx[index] = g.item();
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(vec![dx.len()], dx),
                        );
                    }
                }
                Op::CrossEntropy(label) => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let mut dx = kernels::softmax(self.nodes[x.0].value.data());
                        dx[label] -= 1.0;
                        let gi = g.item();
                        for v in &mut dx {
                            *v *= gi;
                        }
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(vec![dx.len()], dx),
                        );
                    }
                }
                Op::RoiPool => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let argmax = match &self.nodes[id].aux {
                            Aux::RoiPool { argmax } => argmax.clone(),
                            _ => unreachable!("roi node without argmax cache"),
                        };
                        let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g.data()[o];
                        }
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(self.nodes[x.0].value.shape().to_vec(), dx),
                        );
                    }
                }
                Op::Reshape => {
                    let x = inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let s = self.nodes[x.0].value.shape().to_vec();
                        let back = Tensor::from_parts(s, g.data().to_vec());
                        accumulate(&mut grads[x.0], back);
                    }
                }
            }
            self.nodes[id].grad = Some(g);
        }
        // Leaves keep whatever accumulated for them.
        for (i, slot) in grads.into_iter().enumerate() {
            if let Some(t) = slot {
                self.nodes[i].grad = Some(t);
            }
        }
        Ok(())
    }

    /// Gradients of all labeled `param` leaves, by name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if matches!(node.op, Op::Param) {
                if let (Some(label), Some(grad)) = (&node.label, &node.grad) {
                    out.insert(label.clone(), grad.clone());
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_matches_examples() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut g = Graph::new();
        let a = g.input("a", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let b = g.input("b", Tensor::vector(vec![11.0, 12.0, 13.0])).unwrap();
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        assert_eq!(g.value(sa).data(), g.value(sb).data());
    }

    #[test]
    fn conv_of_ones_sums_kernel() {
        let mut g = Graph::new();
        let x = g
            .input("x", Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap())
            .unwrap();
        let w = g
            .param("w", Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap())
            .unwrap();
        let b = g.param("b", Tensor::vector(vec![0.0])).unwrap();
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data()[0], 9.0);
    }

    #[test]
    fn relu_gate_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![-1.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        let loss = g.sum(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::vector(vec![0.2, -1.0, 0.7])).unwrap();
        let loss = g.cross_entropy(z, 2).unwrap();
        g.backward(loss).unwrap();
        let sm = kernels::softmax(&[0.2, -1.0, 0.7]);
        let grad = g.grad(z).unwrap().data();
        for i in 0..3 {
            let expect = sm[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        let err = g.backward(r).unwrap_err();
        assert!(matches!(err, DiffError::LossNotScalar { .. }));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.input("b", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "got: {msg}");
    }

    #[test]
    fn roi_pool_quadrant_maxes() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let x = g
            .input("x", Tensor::new(vec![1, 4, 4], vals).unwrap())
            .unwrap();
        let window = CellWindow {
            x0: 0,
            x1: 4,
            y0: 0,
            y1: 4,
        };
        let out = g.roi_pool_cells(x, window, 2).unwrap();
        assert_eq!(g.value(out).data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn roi_pool_single_bin_is_global_max() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (1..=32).map(|v| v as f64).collect();
        let x = g
            .input("x", Tensor::new(vec![2, 4, 4], vals).unwrap())
            .unwrap();
        let window = CellWindow {
            x0: 0,
            x1: 4,
            y0: 0,
            y1: 4,
        };
        let out = g.roi_pool_cells(x, window, 1).unwrap();
        assert_eq!(g.value(out).data(), &[16.0, 32.0]);
    }

    #[test]
    fn nonfinite_intermediate_is_reported() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1e308, 1e308])).unwrap();
        let err = g.add(x, x).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { .. }));
    }
}
