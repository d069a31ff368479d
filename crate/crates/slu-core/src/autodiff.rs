//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward operation is evaluated eagerly and recorded as a node; a
//! single `backward` sweep walks the tape in reverse and accumulates
//! gradients. Parameter leaves carry the slot index of their entry in the
//! owning [`crate::nn::ParamSet`], which is how gradients find their way back
//! to named parameters.

use crate::error::{Result, SluError};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<F: Scalar> {
    Leaf {
        param_slot: Option<usize>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// Elementwise sum of same-shape inputs.
    AddN {
        parts: Vec<NodeId>,
    },
    /// x (rows×f) + bias (f) broadcast over rows.
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Concatenate along the trailing dim; all parts share the row count.
    Concat {
        parts: Vec<NodeId>,
    },
    /// out[b, :] = w[:, idx[b]] for w: d×c. Gradient scatters back into the
    /// selected columns, which is how conditioning columns pick up gradient
    /// as inputs to later heads on top of their classifier-weight role.
    GatherColumns {
        w: NodeId,
        idx: Vec<usize>,
    },
    /// out[b, :] = x[b, :] * factors[b].
    ScaleRows {
        x: NodeId,
        factors: Vec<F>,
    },
    /// Elementwise product with a constant mask (dropout).
    ScaleElems {
        x: NodeId,
        mask: Vec<F>,
    },
    /// Mean over the first `lengths[b]` timesteps of per-step rows×f inputs.
    MeanOverTime {
        steps: Vec<NodeId>,
        lengths: Vec<usize>,
    },
    /// y = gamma * xhat + beta with cached normalized activations.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    /// Scalar mean over rows of -log softmax(logits)[target].
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Constant input (no gradient tracking beyond pass-through).
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf { param_slot: None })
    }

    /// Trainable leaf bound to a ParamSet slot.
    pub fn param(&mut self, value: Tensor<F>, slot: usize) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                param_slot: Some(slot),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let pv = self.value(p);
            assert_eq!(v.shape(), pv.shape(), "add_n shape mismatch");
            for (o, &x) in v.data_mut().iter_mut().zip(pv.data()) {
                *o += x;
            }
        }
        self.push(v, Op::AddN {
            parts: parts.to_vec(),
        })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(xv.cols(), bv.len(), "add_bias width mismatch");
        let mut v = xv.clone();
        let cols = v.cols();
        for row in v.data_mut().chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(v, Op::AddBias { x, bias })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data);
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data);
        self.push(v, Op::Mul { a, b })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data);
        self.push(v, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.tanh()).collect();
        let v = Tensor::new(xv.shape().to_vec(), data);
        self.push(v, Op::Tanh { x })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![rows, len], data);
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat row mismatch");
                data.extend_from_slice(pv.row(i));
            }
        }
        let v = Tensor::new(vec![rows, total], data);
        self.push(v, Op::Concat {
            parts: parts.to_vec(),
        })
    }

    pub fn gather_columns(&mut self, w: NodeId, idx: Vec<usize>) -> NodeId {
        let wv = self.value(w);
        let (d, c) = (wv.rows(), wv.cols());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &j in &idx {
            assert!(j < c, "gather_columns index {j} out of range {c}");
            for r in 0..d {
                data.push(wv.data()[r * c + j]);
            }
        }
        let v = Tensor::new(vec![idx.len(), d], data);
        self.push(v, Op::GatherColumns { w, idx })
    }

    pub fn scale_rows(&mut self, x: NodeId, factors: Vec<F>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), factors.len(), "scale_rows factor count");
        let cols = xv.cols();
        let mut v = xv.clone();
        for (i, row) in v.data_mut().chunks_mut(cols).enumerate() {
            for o in row.iter_mut() {
                *o *= factors[i];
            }
        }
        self.push(v, Op::ScaleRows { x, factors })
    }

    pub fn scale_elems(&mut self, x: NodeId, mask: Vec<F>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len(), "scale_elems mask length");
        let data = xv
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data);
        self.push(v, Op::ScaleElems { x, mask })
    }

    pub fn mean_over_time(&mut self, steps: &[NodeId], lengths: &[usize]) -> NodeId {
        assert!(!steps.is_empty());
        let rows = self.value(steps[0]).rows();
        let cols = self.value(steps[0]).cols();
        assert_eq!(rows, lengths.len(), "mean_over_time lengths count");
        let mut out = Tensor::<F>::zeros(vec![rows, cols]);
        for (t, &s) in steps.iter().enumerate() {
            let sv = self.value(s);
            for b in 0..rows {
                if t < lengths[b] {
                    let srow = sv.row(b);
                    let orow = &mut out.data_mut()[b * cols..(b + 1) * cols];
                    for (o, &x) in orow.iter_mut().zip(srow) {
                        *o += x;
                    }
                }
            }
        }
        for b in 0..rows {
            assert!(lengths[b] > 0, "mean_over_time zero length");
            let inv = F::one() / F::from_f64(lengths[b] as f64);
            for o in out.row_mut(b) {
                *o *= inv;
            }
        }
        self.push(out, Op::MeanOverTime {
            steps: steps.to_vec(),
            lengths: lengths.to_vec(),
        })
    }

    /// Batch-norm node from pre-computed normalization (see `nn::batch_norm`).
    pub(crate) fn batch_norm_node(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    ) -> NodeId {
        let cols = self.value(x).cols();
        let rows = self.value(x).rows();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(gv[c] * xhat[r * cols + c] + bv[c]);
            }
        }
        let v = Tensor::new(vec![rows, cols], data);
        self.push(v, Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        })
    }

    /// Mean over the batch of -log softmax(logits)[target], max-subtracted.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        assert_eq!(rows, targets.len(), "cross_entropy target count");
        for &t in targets {
            if t >= cols {
                return Err(SluError::InvalidArgument(format!(
                    "target index {t} out of range for {cols} classes"
                )));
            }
        }
        let mut probs = vec![F::zero(); rows * cols];
        let mut loss = F::zero();
        for b in 0..rows {
            let row = lv.row(b);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * cols + j] = e;
                denom += e;
            }
            for p in &mut probs[b * cols..(b + 1) * cols] {
                *p = *p / denom;
            }
            let pt = probs[b * cols + targets[b]];
            loss -= pt.ln();
        }
        loss /= F::from_f64(rows as f64);
        let v = Tensor::scalar(loss);
        Ok(self.push(v, Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        }))
    }

    /// Reverse sweep from `root` (must be scalar). Returns per-node gradients;
    /// use [`Tape::leaf_grads`] to fold them into a ParamSet.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor<F>>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(Tensor::scalar(F::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let acc = |grads: &mut [Option<Tensor<F>>], id: NodeId, contrib: Tensor<F>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (o, &x) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *o += x;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddN { parts } => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
            Op::AddBias { x, bias } => {
                acc(grads, *x, g.clone());
                let cols = g.cols();
                let mut db = Tensor::<F>::zeros(vec![cols]);
                for row in g.data().chunks(cols) {
                    for (o, &x) in db.data_mut().iter_mut().zip(row) {
                        *o += x;
                    }
                }
                acc(grads, *bias, db);
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.clone());
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| -v).collect(),
                );
                acc(grads, *b, neg);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&gv, &x)| gv * x)
                        .collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| gv * x)
                        .collect(),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[i].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&gv, &y)| gv * y * (F::one() - y))
                        .collect(),
                );
                acc(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let yv = &self.nodes[i].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&gv, &y)| gv * (F::one() - y * y))
                        .collect(),
                );
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut dx = Tensor::<F>::zeros(xv.shape().to_vec());
                let cols = xv.cols();
                for r in 0..xv.rows() {
                    let grow = g.row(r);
                    let drow = &mut dx.data_mut()[r * cols + start..r * cols + start + len];
                    drow.copy_from_slice(grow);
                }
                acc(grads, *x, dx);
            }
            Op::Concat { parts } => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let pc = pv.cols();
                    let mut dp = Tensor::<F>::zeros(pv.shape().to_vec());
                    for r in 0..rows {
                        let grow = &g.row(r)[offset..offset + pc];
                        dp.row_mut(r).copy_from_slice(grow);
                    }
                    acc(grads, p, dp);
                    offset += pc;
                }
            }
            Op::GatherColumns { w, idx } => {
                let wv = self.value(*w);
                let (d, c) = (wv.rows(), wv.cols());
                let mut dw = Tensor::<F>::zeros(vec![d, c]);
                for (b, &j) in idx.iter().enumerate() {
                    let grow = g.row(b);
                    for r in 0..d {
                        dw.data_mut()[r * c + j] += grow[r];
                    }
                }
                acc(grads, *w, dw);
            }
            Op::ScaleRows { x, factors } => {
                let cols = g.cols();
                let mut dx = g.clone();
                for (b, row) in dx.data_mut().chunks_mut(cols).enumerate() {
                    for o in row.iter_mut() {
                        *o *= factors[b];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ScaleElems { x, mask } => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gv, &m)| gv * m)
                        .collect(),
                );
                acc(grads, *x, dx);
            }
            Op::MeanOverTime { steps, lengths } => {
                let cols = g.cols();
                for (t, &s) in steps.iter().enumerate() {
                    let needed = lengths.iter().any(|&l| t < l);
                    if !needed {
                        continue;
                    }
                    let mut ds = Tensor::<F>::zeros(self.value(s).shape().to_vec());
                    for b in 0..lengths.len() {
                        if t < lengths[b] {
                            let inv = F::one() / F::from_f64(lengths[b] as f64);
                            let grow = g.row(b);
                            let drow = &mut ds.data_mut()[b * cols..(b + 1) * cols];
                            for (o, &x) in drow.iter_mut().zip(grow) {
                                *o = x * inv;
                            }
                        }
                    }
                    acc(grads, s, ds);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let rows = g.rows();
                let cols = g.cols();
                let gv = self.value(*gamma).data().to_vec();

                let mut dgamma = Tensor::<F>::zeros(vec![cols]);
                let mut dbeta = Tensor::<F>::zeros(vec![cols]);
                for r in 0..rows {
                    let grow = g.row(r);
                    for c in 0..cols {
                        dgamma.data_mut()[c] += grow[c] * xhat[r * cols + c];
                        dbeta.data_mut()[c] += grow[c];
                    }
                }

                let mut dx = Tensor::<F>::zeros(vec![rows, cols]);
                if *train {
                    // Differentiates through the batch statistics.
                    let n = F::from_f64(rows as f64);
                    for c in 0..cols {
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for r in 0..rows {
                            sum_g += g.data()[r * cols + c];
                            sum_gx += g.data()[r * cols + c] * xhat[r * cols + c];
                        }
                        let mean_g = sum_g / n;
                        let mean_gx = sum_gx / n;
                        for r in 0..rows {
                            let gi = g.data()[r * cols + c];
                            let xh = xhat[r * cols + c];
                            dx.data_mut()[r * cols + c] =
                                gv[c] * inv_std[c] * (gi - mean_g - xh * mean_gx);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx.data_mut()[r * cols + c] =
                                g.data()[r * cols + c] * gv[c] * inv_std[c];
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (rows, cols) = (lv.rows(), lv.cols());
                let scale = g.item() / F::from_f64(rows as f64);
                let mut dl = Tensor::<F>::zeros(vec![rows, cols]);
                for b in 0..rows {
                    for j in 0..cols {
                        let indicator = if j == targets[b] { F::one() } else { F::zero() };
                        dl.data_mut()[b * cols + j] = (probs[b * cols + j] - indicator) * scale;
                    }
                }
                acc(grads, *logits, dl);
            }
        }
    }

    /// Collect gradients of parameter leaves as (slot, grad) pairs.
    pub fn leaf_grads(&self, grads: &[Option<Tensor<F>>]) -> Vec<(usize, Tensor<F>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                param_slot: Some(slot),
            } = node.op
            {
                if let Some(g) = &grads[i] {
                    out.push((slot, g.clone()));
                }
            }
        }
        out
    }
}


#[cfg(test)]
impl<F: Scalar> Tape<F> {
    /// Test helper: backward from sum(all elements of `node`).
    fn backward_sum_for_test(&self, node: NodeId) -> Vec<Option<Tensor<F>>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node.0] = Some(Tensor::full(self.value(node).shape().to_vec(), F::one()));
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }
}
