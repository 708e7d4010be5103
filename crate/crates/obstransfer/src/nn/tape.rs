use super::{NnError, Tensor};

const NORM_EPS: f64 = 1e-16;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

enum Op {
    Leaf,
    Constant,
    StopGradient,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Act(NodeId, Activation),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, stride: usize },
    Flatten(NodeId),
    UnitNormalize(NodeId),
    Sub(NodeId, NodeId),
    Mse(NodeId, NodeId),
    RowSumSquareMean(NodeId),
    SelectActions(NodeId, Vec<usize>),
    PerActionAffine { input: NodeId, weights: Vec<NodeId>, biases: Vec<NodeId>, actions: Vec<usize> },
    AddScaled(NodeId, NodeId, f64),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape. Nodes only reference earlier nodes, so a
/// single reverse sweep in insertion order is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op, what: &'static str) -> Result<NodeId, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(what));
        }
        let grad = if needs_grad { vec![0.0; value.numel()] } else { Vec::new() };
        self.nodes.push(Node { value, grad, needs_grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. the node's value.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Differentiable leaf (parameters, or inputs under gradient check).
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, NnError> {
        self.push(value, true, Op::Leaf, "leaf")
    }

    /// Non-differentiable input (observations, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, NnError> {
        self.push(value, false, Op::Constant, "constant")
    }

    /// Identity on values; blocks all gradient flow into its parent.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let v = self.value(x).clone();
        self.push(v, false, Op::StopGradient, "stop_gradient")
    }

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(NnError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ash, bsh
            )));
        }
        let (n, k, m) = (ash[0], ash[1], bsh[1]);
        let out = matmul(av.data(), bv.data(), n, k, m);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, m], out)?, needs, Op::MatMul(a, b), "matmul")
    }

    /// Adds a `[m]` bias row-wise to a `[n,m]` matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xv, bv) = (self.value(x), self.value(b));
        let xsh = xv.shape().to_vec();
        if xsh.len() != 2 || bv.shape() != [xsh[1]] {
            return Err(NnError::ShapeMismatch(format!(
                "add_bias {:?} + {:?}",
                xsh,
                bv.shape()
            )));
        }
        let m = xsh[1];
        let mut out = xv.data().to_vec();
        let bd = bv.data();
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(bd) {
                *o += *bb;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Tensor::new(xsh, out)?, needs, Op::AddBias(x, b), "add_bias")
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> Result<NodeId, NnError> {
        if act == Activation::Linear {
            return Ok(x);
        }
        let xv = self.value(x);
        let out: Vec<f64> = match act {
            Activation::Relu => xv.data().iter().map(|v| v.max(0.0)).collect(),
            Activation::Tanh => xv.data().iter().map(|v| v.tanh()).collect(),
            Activation::Linear => unreachable!(),
        };
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, needs, Op::Act(x, act), "activation")
    }

    /// Valid (no padding) 2-d convolution.
    /// input `[n,c,h,w]`, weight `[oc,c,k,k]`, bias `[oc]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize) -> Result<NodeId, NnError> {
        let (iv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let ish = iv.shape();
        let wsh = wv.shape();
        if ish.len() != 4 || wsh.len() != 4 || ish[1] != wsh[1] || bv.shape() != [wsh[0]] {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d input {:?} weight {:?} bias {:?}",
                ish,
                wsh,
                bv.shape()
            )));
        }
        let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
        let (oc, k) = (wsh[0], wsh[2]);
        if wsh[2] != wsh[3] || k > h || k > w || stride == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d kernel {:?} on {}x{} stride {}",
                &wsh[2..], h, w, stride
            )));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let cols = im2col(iv.data(), n, c, h, w, k, stride, oh, ow);
        let ckk = c * k * k;
        // rows [n*oh*ow, ckk] x weight^T [ckk, oc]
        let wt = transpose(wv.data(), oc, ckk);
        let mut rows = matmul(&cols, &wt, n * oh * ow, ckk, oc);
        let bd = bv.data();
        for row in rows.chunks_mut(oc) {
            for (o, bb) in row.iter_mut().zip(bd) {
                *o += *bb;
            }
        }
        // permute [p, oc] -> [n, oc, oh, ow]
        let mut out = vec![0.0; n * oc * oh * ow];
        for nn in 0..n {
            for p in 0..oh * ow {
                let src = ((nn * oh * ow) + p) * oc;
                for o in 0..oc {
                    out[((nn * oc) + o) * oh * ow + p] = rows[src + o];
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            Tensor::new(vec![n, oc, oh, ow], out)?,
            needs,
            Op::Conv2d { input, weight, bias, stride },
            "conv2d",
        )
    }

    /// `[n, rest..] -> [n, prod(rest)]`
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        let sh = xv.shape();
        if sh.len() < 2 {
            return Err(NnError::ShapeMismatch(format!("flatten {:?}", sh)));
        }
        let n = sh[0];
        let rest: usize = sh[1..].iter().product();
        let v = xv.clone().reshaped(vec![n, rest])?;
        let needs = self.needs(x);
        self.push(v, needs, Op::Flatten(x), "flatten")
    }

    /// Scales every row of a `[n,d]` batch to unit Euclidean norm. The
    /// divisor is `sqrt(||x||^2 + 1e-16)`: bitwise identical to the plain
    /// norm for any row of meaningful magnitude, but well-defined (output
    /// zero) on all-zero rows such as padded observations.
    pub fn unit_normalize(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        if sh.len() != 2 {
            return Err(NnError::ShapeMismatch(format!("unit_normalize {:?}", sh)));
        }
        let d = sh[1];
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let s = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| v / s));
        }
        let needs = self.needs(x);
        self.push(Tensor::new(sh, out)?, needs, Op::UnitNormalize(x), "unit_normalize")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "sub {:?} - {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let sh = av.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(sh, out)?, needs, Op::Sub(a, b), "sub")
    }

    /// Mean over all elements of `(a-b)^2`; scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "mse {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.numel();
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s / n as f64), needs, Op::Mse(a, b), "mse")
    }

    /// `(1/rows) * sum of squares` over a `[n,d]` batch: squared residual
    /// norms summed per row, averaged over the batch.
    pub fn row_sum_square_mean(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(NnError::ShapeMismatch(format!(
                "row_sum_square_mean {:?}",
                xv.shape()
            )));
        }
        let rows = xv.shape()[0];
        if rows == 0 {
            return Err(NnError::ShapeMismatch("empty batch".into()));
        }
        let s: f64 = xv.data().iter().map(|v| v * v).sum();
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(s / rows as f64),
            needs,
            Op::RowSumSquareMean(x),
            "row_sum_square_mean",
        )
    }

    /// Picks `x[i, actions[i]]` from a `[n,a]` matrix into a `[n]` vector.
    pub fn select_actions(&mut self, x: NodeId, actions: &[usize]) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        let sh = xv.shape();
        if sh.len() != 2 || sh[0] != actions.len() || actions.iter().any(|a| *a >= sh[1]) {
            return Err(NnError::ShapeMismatch(format!(
                "select_actions on {:?} with {} actions",
                sh,
                actions.len()
            )));
        }
        let a = sh[1];
        let out: Vec<f64> = actions
            .iter()
            .enumerate()
            .map(|(i, act)| xv.data()[i * a + act])
            .collect();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(out),
            needs,
            Op::SelectActions(x, actions.to_vec()),
            "select_actions",
        )
    }

    /// Row-wise per-action affine map: `out[i] = W_{a_i} x[i] + b_{a_i}`.
    /// `weights[a]` is `[od, d]`, `biases[a]` is `[od]`, input `[n, d]`.
    pub fn per_action_affine(
        &mut self,
        input: NodeId,
        weights: &[NodeId],
        biases: &[NodeId],
        actions: &[usize],
    ) -> Result<NodeId, NnError> {
        let xv = self.value(input);
        let sh = xv.shape();
        if sh.len() != 2 || sh[0] != actions.len() || weights.len() != biases.len() {
            return Err(NnError::ShapeMismatch(format!(
                "per_action_affine on {:?} with {} actions",
                sh,
                actions.len()
            )));
        }
        if weights.is_empty() || actions.iter().any(|a| *a >= weights.len()) {
            return Err(NnError::ShapeMismatch("action index out of range".into()));
        }
        let d = sh[1];
        let od = self.value(weights[0]).shape()[0];
        for (w, b) in weights.iter().zip(biases) {
            if self.value(*w).shape() != [od, d] || self.value(*b).shape() != [od] {
                return Err(NnError::ShapeMismatch(format!(
                    "per_action_affine weight {:?} bias {:?}, want [{od},{d}]/[{od}]",
                    self.value(*w).shape(),
                    self.value(*b).shape()
                )));
            }
        }
        let n = sh[0];
        let mut out = vec![0.0; n * od];
        for i in 0..n {
            let a = actions[i];
            let w = self.nodes[weights[a].0].value.data();
            let b = self.nodes[biases[a].0].value.data();
            let x = &self.nodes[input.0].value.data()[i * d..(i + 1) * d];
            for o in 0..od {
                let wrow = &w[o * d..(o + 1) * d];
                let mut acc = b[o];
                for (wi, xi) in wrow.iter().zip(x) {
                    acc += wi * xi;
                }
                out[i * od + o] = acc;
            }
        }
        let needs = self.needs(input)
            || weights.iter().any(|w| self.needs(*w))
            || biases.iter().any(|b| self.needs(*b));
        self.push(
            Tensor::new(vec![n, od], out)?,
            needs,
            Op::PerActionAffine {
                input,
                weights: weights.to_vec(),
                biases: biases.to_vec(),
                actions: actions.to_vec(),
            },
            "per_action_affine",
        )
    }

    /// Scalar combination `a + c*b`.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_scalar() || !bv.is_scalar() {
            return Err(NnError::ShapeMismatch("add_scaled wants scalars".into()));
        }
        let v = av.scalar_value() + c * bv.scalar_value();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(v), needs, Op::AddScaled(a, b, c), "add_scaled")
    }

    /// Propagates gradients from a scalar loss to every reachable
    /// differentiable node. The tape may only be consumed once.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        if self.nodes[loss.0].needs_grad {
            self.nodes[loss.0].grad[0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let contribs = self.contributions(i);
            for (pid, c) in contribs {
                let p = &mut self.nodes[pid];
                debug_assert_eq!(p.grad.len(), c.len());
                for (g, ci) in p.grad.iter_mut().zip(&c) {
                    *g += *ci;
                }
            }
        }
        Ok(())
    }

    /// Computes the gradient contribution of node `i` to each
    /// gradient-requiring parent.
    fn contributions(&self, i: usize) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let g = &node.grad;
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        let emit = |id: NodeId, v: Vec<f64>, this: &mut Vec<(usize, Vec<f64>)>| {
            if self.nodes[id.0].needs_grad {
                this.push((id.0, v));
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let (n, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let m = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].needs_grad {
                    // dA = g . B^T
                    let bt = transpose(bv, k, m);
                    emit(*a, matmul(g, &bt, n, m, k), &mut out);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T . g
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            let grow = &g[i * m..(i + 1) * m];
                            let drow = &mut db[kk * m..(kk + 1) * m];
                            for (d, gg) in drow.iter_mut().zip(grow) {
                                *d += aik * gg;
                            }
                        }
                    }
                    emit(*b, db, &mut out);
                }
            }
            Op::AddBias(x, b) => {
                let m = self.nodes[b.0].value.numel();
                if self.nodes[x.0].needs_grad {
                    emit(*x, g.clone(), &mut out);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (d, gg) in db.iter_mut().zip(row) {
                            *d += *gg;
                        }
                    }
                    emit(*b, db, &mut out);
                }
            }
            Op::Act(x, act) => {
                if self.nodes[x.0].needs_grad {
                    let dv: Vec<f64> = match act {
                        Activation::Relu => {
                            let xv = self.nodes[x.0].value.data();
                            xv.iter()
                                .zip(g)
                                .map(|(v, gg)| if *v > 0.0 { *gg } else { 0.0 })
                                .collect()
                        }
                        Activation::Tanh => {
                            let yv = node.value.data();
                            yv.iter().zip(g).map(|(y, gg)| gg * (1.0 - y * y)).collect()
                        }
                        Activation::Linear => unreachable!(),
                    };
                    emit(*x, dv, &mut out);
                }
            }
            Op::Conv2d { input, weight, bias, stride } => {
                let iv = &self.nodes[input.0].value;
                let wv = &self.nodes[weight.0].value;
                let (n, c, h, w) = {
                    let s = iv.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (oc, k) = (wv.shape()[0], wv.shape()[2]);
                let oh = (h - k) / stride + 1;
                let ow = (w - k) / stride + 1;
                let ckk = c * k * k;
                let p = n * oh * ow;
                // permute grad [n, oc, oh, ow] -> dRows [p, oc]
                let mut drows = vec![0.0; p * oc];
                for nn in 0..n {
                    for o in 0..oc {
                        for q in 0..oh * ow {
                            drows[(nn * oh * ow + q) * oc + o] =
                                g[((nn * oc) + o) * oh * ow + q];
                        }
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![0.0; oc];
                    for row in drows.chunks(oc) {
                        for (d, gg) in db.iter_mut().zip(row) {
                            *d += *gg;
                        }
                    }
                    emit(*bias, db, &mut out);
                }
                let cols_needed = self.nodes[weight.0].needs_grad;
                let cols = if cols_needed {
                    im2col(iv.data(), n, c, h, w, k, *stride, oh, ow)
                } else {
                    Vec::new()
                };
                if cols_needed {
                    // dW = dRows^T . cols  -> [oc, ckk]
                    let mut dw = vec![0.0; oc * ckk];
                    for pi in 0..p {
                        let crow = &cols[pi * ckk..(pi + 1) * ckk];
                        for o in 0..oc {
                            let go = drows[pi * oc + o];
                            if go == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[o * ckk..(o + 1) * ckk];
                            for (d, cc) in drow.iter_mut().zip(crow) {
                                *d += go * cc;
                            }
                        }
                    }
                    emit(*weight, dw, &mut out);
                }
                if self.nodes[input.0].needs_grad {
                    // dCols = dRows . W  -> [p, ckk], then scatter back.
                    let dcols = matmul(&drows, wv.data(), p, oc, ckk);
                    let dinput = col2im(&dcols, n, c, h, w, k, *stride, oh, ow);
                    emit(*input, dinput, &mut out);
                }
            }
            Op::Flatten(x) => {
                if self.nodes[x.0].needs_grad {
                    emit(*x, g.clone(), &mut out);
                }
            }
            Op::UnitNormalize(x) => {
                if self.nodes[x.0].needs_grad {
                    let xv = self.nodes[x.0].value.data();
                    let yv = node.value.data();
                    let d = node.value.shape()[1];
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..node.value.shape()[0] {
                        let xr = &xv[r * d..(r + 1) * d];
                        let yr = &yv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s = (xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for j in 0..d {
                            dx[r * d + j] = (gr[j] - yr[j] * dot) / s;
                        }
                    }
                    emit(*x, dx, &mut out);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].needs_grad {
                    emit(*a, g.clone(), &mut out);
                }
                if self.nodes[b.0].needs_grad {
                    emit(*b, g.iter().map(|v| -v).collect(), &mut out);
                }
            }
            Op::Mse(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let n = av.len() as f64;
                let scale = 2.0 * g[0] / n;
                if self.nodes[a.0].needs_grad {
                    emit(
                        *a,
                        av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect(),
                        &mut out,
                    );
                }
                if self.nodes[b.0].needs_grad {
                    emit(
                        *b,
                        av.iter().zip(bv).map(|(x, y)| -scale * (x - y)).collect(),
                        &mut out,
                    );
                }
            }
            Op::RowSumSquareMean(x) => {
                if self.nodes[x.0].needs_grad {
                    let xv = self.nodes[x.0].value.data();
                    let rows = self.nodes[x.0].value.shape()[0] as f64;
                    let scale = 2.0 * g[0] / rows;
                    emit(*x, xv.iter().map(|v| scale * v).collect(), &mut out);
                }
            }
            Op::SelectActions(x, actions) => {
                if self.nodes[x.0].needs_grad {
                    let a = self.nodes[x.0].value.shape()[1];
                    let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                    for (i, act) in actions.iter().enumerate() {
                        dx[i * a + act] += g[i];
                    }
                    emit(*x, dx, &mut out);
                }
            }
            Op::PerActionAffine { input, weights, biases, actions } => {
                let xv = &self.nodes[input.0].value;
                let d = xv.shape()[1];
                let od = self.nodes[weights[0].0].value.shape()[0];
                if self.nodes[input.0].needs_grad {
                    let mut dx = vec![0.0; xv.numel()];
                    for (i, a) in actions.iter().enumerate() {
                        let wv = self.nodes[weights[*a].0].value.data();
                        let gr = &g[i * od..(i + 1) * od];
                        let dxr = &mut dx[i * d..(i + 1) * d];
                        for o in 0..od {
                            let go = gr[o];
                            let wrow = &wv[o * d..(o + 1) * d];
                            for (dd, ww) in dxr.iter_mut().zip(wrow) {
                                *dd += go * ww;
                            }
                        }
                    }
                    emit(*input, dx, &mut out);
                }
                for a in 0..weights.len() {
                    let w_needs = self.nodes[weights[a].0].needs_grad;
                    let b_needs = self.nodes[biases[a].0].needs_grad;
                    if !w_needs && !b_needs {
                        continue;
                    }
                    let mut dw = vec![0.0; od * d];
                    let mut db = vec![0.0; od];
                    for (i, ai) in actions.iter().enumerate() {
                        if *ai != a {
                            continue;
                        }
                        let xr = &xv.data()[i * d..(i + 1) * d];
                        let gr = &g[i * od..(i + 1) * od];
                        for o in 0..od {
                            let go = gr[o];
                            db[o] += go;
                            let drow = &mut dw[o * d..(o + 1) * d];
                            for (dd, xx) in drow.iter_mut().zip(xr) {
                                *dd += go * xx;
                            }
                        }
                    }
                    if w_needs {
                        emit(weights[a], dw, &mut out);
                    }
                    if b_needs {
                        emit(biases[a], db, &mut out);
                    }
                }
            }
            Op::AddScaled(a, b, c) => {
                if self.nodes[a.0].needs_grad {
                    emit(*a, vec![g[0]], &mut out);
                }
                if self.nodes[b.0].needs_grad {
                    emit(*b, vec![g[0] * c], &mut out);
                }
            }
        }
        out
    }
}

/// `a [n,k] x b [k,m]`, both row-major. A row-major buffer read as
/// column-major is the transpose, so computing `b^T * a^T` on borrowed
/// views yields `(a * b)^T` column-major, i.e. `a * b` row-major, with
/// no input copies. Single-threaded and deterministic run to run.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let at = nalgebra::DMatrixView::from_slice(a, k, n);
    let bt = nalgebra::DMatrixView::from_slice(b, m, k);
    let mut out = nalgebra::DMatrix::<f64>::zeros(m, n);
    out.gemm(1.0, &bt, &at, 0.0);
    out.data.into()
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ckk = c * k * k;
    let mut cols = vec![0.0; n * oh * ow * ckk];
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let p = (nn * oh + oy) * ow + ox;
                let dst = &mut cols[p * ckk..(p + 1) * ckk];
                let mut q = 0;
                for cc in 0..c {
                    let plane = &input[((nn * c) + cc) * h * w..((nn * c) + cc + 1) * h * w];
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        let src = &plane[iy * w + ox * stride..iy * w + ox * stride + k];
                        dst[q..q + k].copy_from_slice(src);
                        q += k;
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ckk = c * k * k;
    let mut dinput = vec![0.0; n * c * h * w];
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let p = (nn * oh + oy) * ow + ox;
                let src = &dcols[p * ckk..(p + 1) * ckk];
                let mut q = 0;
                for cc in 0..c {
                    let base = ((nn * c) + cc) * h * w;
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        let dst = &mut dinput
                            [base + iy * w + ox * stride..base + iy * w + ox * stride + k];
                        for (d, s) in dst.iter_mut().zip(&src[q..q + k]) {
                            *d += *s;
                        }
                        q += k;
                    }
                }
            }
        }
    }
    dinput
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn matmul_known_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = t.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![-2.0, 0.0, 3.5])).unwrap();
        let y = t.activation(x, Activation::Relu).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 3.5]);
    }

    #[test]
    fn conv_all_ones_counts_window() {
        let mut t = Tape::new();
        let input = t.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap()).unwrap();
        let w = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap()).unwrap();
        let b = t.constant(Tensor::from_vec(vec![0.0])).unwrap();
        let y = t.conv2d(input, w, b, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_stride_and_bias() {
        // 1x4x4 ramp, 2x2 all-ones kernel, stride 2, bias 10.
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut t = Tape::new();
        let input = t.constant(Tensor::new(vec![1, 1, 4, 4], data).unwrap()).unwrap();
        let w = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap()).unwrap();
        let b = t.constant(Tensor::from_vec(vec![10.0])).unwrap();
        let y = t.conv2d(input, w, b, 2).unwrap();
        assert_eq!(t.value(y).data(), &[20.0, 28.0, 52.0, 60.0]);
    }

    #[test]
    fn unit_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let y = t.unit_normalize(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn unit_normalize_zero_row_stays_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let y = t.unit_normalize(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mse_known_value() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = t.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let l = t.mse(a, b).unwrap();
        assert_eq!(t.value(l).scalar_value(), 2.5);
    }

    #[test]
    fn row_sum_square_mean_sums_within_rows() {
        // A single residual row [1, 0] must score 1.0, not the element
        // mean 0.5: squared norms are summed per row, averaged over rows.
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let l = t.row_sum_square_mean(x).unwrap();
        assert_eq!(t.value(l).scalar_value(), 1.0);

        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, 0.0]).unwrap()).unwrap();
        let l = t.row_sum_square_mean(x).unwrap();
        assert_eq!(t.value(l).scalar_value(), (2.0 + 9.0) / 2.0);
    }

    #[test]
    fn select_actions_picks_and_scatters() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let picked = t.select_actions(q, &[2, 0]).unwrap();
        assert_eq!(t.value(picked).data(), &[3.0, 4.0]);
        let tgt = t.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let l = t.mse(picked, tgt).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(q);
        assert_eq!(g[2], 3.0); // 2/2 * (3-0)
        assert_eq!(g[3], 4.0);
        assert_eq!(g[0] + g[1] + g[4] + g[5], 0.0);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![2.0, -1.0])).unwrap();
        let blocked = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(blocked).data(), t.value(x).data());
        let diff = t.sub(x, blocked).unwrap();
        assert_eq!(t.value(diff).data(), &[0.0, 0.0]);
        let two_x = t.sub(x, blocked); // keep graph alive
        drop(two_x);
        let tgt = t.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let l = t.mse(blocked, tgt).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_single_use() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0)).unwrap();
        let y = t.stop_gradient(x).unwrap();
        let l = t.mse(x, y).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(NnError::GraphConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(Tensor::from_vec(vec![f64::NAN])),
            Err(NnError::NonFinite(_))
        ));
    }

    #[test]
    fn per_action_affine_routes_rows() {
        let mut t = Tape::new();
        let w0 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let w1 = t.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let b0 = t.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let b1 = t.constant(Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        let x = t.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = t.per_action_affine(x, &[w0, w1], &[b0, b1], &[0, 1]).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0, 7.0, 9.0]);
    }
}
