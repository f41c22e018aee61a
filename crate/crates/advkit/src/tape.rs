//! Reverse-mode differentiation on a linear tape.
//!
//! A forward pass records one node per operation; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients into every node reachable
//! from the loss whose inputs require them. Construction order is the
//! topological order, so a single reverse sweep suffices.

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[B,M] x [M,N] -> [B,N]`
    MatMul { a: Var, b: Var },
    /// `[B,N] + [N]` broadcast over rows
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Relu { x: Var },
    Reshape { x: Var },
    /// Stride-1, unpadded 2-D convolution: `[B,C,H,W] * [F,C,KH,KW] + [F]`
    Conv2d { x: Var, w: Var, bias: Var },
    /// 2x2 max pooling with stride 2; `switches` holds the winning input
    /// index for each output element.
    MaxPool2 { x: Var, switches: Vec<usize> },
    /// Row-wise softmax over the last axis of `[B,K]`.
    Softmax { x: Var },
    /// Mean cross-entropy of `[B,K]` logits against fixed target rows.
    CrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
    /// Mean over rows of the squared L2 distance to fixed target rows.
    MseRows { pred: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Register a tensor as a leaf. Gradients are tracked iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Register a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Copy a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.node(v).shape.clone(), self.node(v).value.clone()).expect("tape node")
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// participates in gradient tracking.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = self.node(v);
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.node(a).value, &self.node(b).value);
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * db[p * n + j];
                }
            }
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.node(x).shape.clone(), self.node(bias).shape.clone());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sb[0];
        let out: Vec<f64> = self
            .node(x)
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.node(bias).value[i % n])
            .collect();
        let rg = self.node(x).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(sx, out, rg, Op::AddBias { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        let out: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(shape, out, rg, op(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.node(x).value.iter().map(|v| v * c).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(shape, out, rg, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.node(x).value.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.node(x).value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(shape, out, rg, Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.node(x).value.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} as {shape:?}", self.node(x).shape),
            ));
        }
        let value = self.node(x).value.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, value, rg, Op::Reshape { x }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        let sb = self.node(bias).shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if sb != vec![f] {
            return Err(Error::shape("conv2d", format!("bias {sb:?}, expected [{f}]")));
        }
        if kh > h || kw > wd {
            return Err(Error::shape("conv2d", format!("kernel {sw:?} larger than input {sx:?}")));
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![0.0; b * f * oh * ow];
        {
            let xv = &self.node(x).value;
            let wv = &self.node(w).value;
            let bv = &self.node(bias).value;
            for bi in 0..b {
                for fi in 0..f {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut s = bv[fi];
                            for ci in 0..c {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        s += xv[((bi * c + ci) * h + i + u) * wd + j + v]
                                            * wv[((fi * c + ci) * kh + u) * kw + v];
                                    }
                                }
                            }
                            out[((bi * f + fi) * oh + i) * ow + j] = s;
                        }
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(w).requires_grad
            || self.node(bias).requires_grad;
        Ok(self.push(vec![b, f, oh, ow], out, rg, Op::Conv2d { x, w, bias }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::shape("max_pool2", format!("input {sx:?}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * oh * ow];
        let mut switches = vec![0usize; b * c * oh * ow];
        {
            let xv = &self.node(x).value;
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best_idx = ((bi * c + ci) * h + 2 * i) * w + 2 * j;
                            let mut best = xv[best_idx];
                            for du in 0..2 {
                                for dv in 0..2 {
                                    let idx = ((bi * c + ci) * h + 2 * i + du) * w + 2 * j + dv;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = ((bi * c + ci) * oh + i) * ow + j;
                            out[o] = best;
                            switches[o] = best_idx;
                        }
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![b, c, oh, ow], out, rg, Op::MaxPool2 { x, switches }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 2 {
            return Err(Error::shape("softmax", format!("expected [B,K], got {sx:?}")));
        }
        let out = softmax_rows(&self.node(x).value, sx[1]);
        let rg = self.node(x).requires_grad;
        Ok(self.push(sx, out, rg, Op::Softmax { x }))
    }

    /// Mean cross-entropy of logits against per-row target distributions.
    ///
    /// Target rows must be probability vectors; non-normalized rows are a
    /// contract violation.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let sl = self.node(logits).shape.clone();
        if sl.len() != 2 || targets.shape() != sl.as_slice() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {sl:?} vs targets {:?}", targets.shape()),
            ));
        }
        validate_target_rows("cross_entropy", targets)?;
        let (b, k) = (sl[0], sl[1]);
        let probs = softmax_rows(&self.node(logits).value, k);
        let zv = &self.node(logits).value;
        let mut total = 0.0;
        for bi in 0..b {
            let row = &zv[bi * k..(bi + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for ki in 0..k {
                total += targets.data()[bi * k + ki] * (lse - row[ki]);
            }
        }
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![total / b as f64],
            rg,
            Op::CrossEntropy { logits, targets: targets.data().to_vec(), probs },
        ))
    }

    /// Mean over rows of the squared L2 distance between `pred` and targets.
    pub fn mse_rows(&mut self, pred: Var, targets: &Tensor) -> Result<Var> {
        let sp = self.node(pred).shape.clone();
        if sp.len() != 2 || targets.shape() != sp.as_slice() {
            return Err(Error::shape(
                "mse",
                format!("pred {sp:?} vs targets {:?}", targets.shape()),
            ));
        }
        let b = sp[0] as f64;
        let total: f64 = self
            .node(pred)
            .value
            .iter()
            .zip(targets.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.node(pred).requires_grad;
        Ok(self.push(
            vec![1],
            vec![total / b],
            rg,
            Op::MseRows { pred, targets: targets.data().to_vec() },
        ))
    }

    /// Propagate gradients from a scalar loss to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.node(loss).shape),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone().unwrap();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.node(a).shape[0], self.node(a).shape[1]);
                    let n = self.node(b).shape[1];
                    if self.node(a).requires_grad {
                        let bv = self.node(b).value.clone();
                        let ga = self.grad_buf(a);
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bv[p * n + j];
                                }
                                ga[i2 * k + p] += s;
                            }
                        }
                    }
                    if self.node(b).requires_grad {
                        let av = self.node(a).value.clone();
                        let gb = self.grad_buf(b);
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += av[i2 * k + p] * g[i2 * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.node(x).requires_grad {
                        let gx = self.grad_buf(x);
                        for (gi, &gv) in gx.iter_mut().zip(&g) {
                            *gi += gv;
                        }
                    }
                    if self.node(bias).requires_grad {
                        let n = self.node(bias).value.len();
                        let gb = self.grad_buf(bias);
                        for (i2, &gv) in g.iter().enumerate() {
                            gb[i2 % n] += gv;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (v, sign) in [(a, 1.0), (b, 1.0)] {
                        self.accumulate_scaled(v, &g, sign);
                    }
                }
                Op::Sub { a, b } => {
                    self.accumulate_scaled(a, &g, 1.0);
                    self.accumulate_scaled(b, &g, -1.0);
                }
                Op::Mul { a, b } => {
                    if self.node(a).requires_grad {
                        let bv = self.node(b).value.clone();
                        let ga = self.grad_buf(a);
                        for ((gi, &gv), &bvv) in ga.iter_mut().zip(&g).zip(&bv) {
                            *gi += gv * bvv;
                        }
                    }
                    if self.node(b).requires_grad {
                        let av = self.node(a).value.clone();
                        let gb = self.grad_buf(b);
                        for ((gi, &gv), &avv) in gb.iter_mut().zip(&g).zip(&av) {
                            *gi += gv * avv;
                        }
                    }
                }
                Op::Scale { x, c } => self.accumulate_scaled(x, &g, c),
                Op::Sum { x } => {
                    if self.node(x).requires_grad {
                        let gx = self.grad_buf(x);
                        for gi in gx.iter_mut() {
                            *gi += g[0];
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.node(x).requires_grad {
                        let xv = self.node(x).value.clone();
                        let gx = self.grad_buf(x);
                        for ((gi, &gv), &xvv) in gx.iter_mut().zip(&g).zip(&xv) {
                            if xvv > 0.0 {
                                *gi += gv;
                            }
                        }
                    }
                }
                Op::Reshape { x } => self.accumulate_scaled(x, &g, 1.0),
                Op::Conv2d { x, w, bias } => self.conv2d_backward(x, w, bias, i, &g),
                Op::MaxPool2 { x, switches } => {
                    if self.node(x).requires_grad {
                        let gx = self.grad_buf(x);
                        for (o, &src) in switches.iter().enumerate() {
                            gx[src] += g[o];
                        }
                    }
                }
                Op::Softmax { x } => {
                    if self.node(x).requires_grad {
                        let k = self.node(x).shape[1];
                        let p = self.nodes[i].value.clone();
                        let gx = self.grad_buf(x);
                        for (row, (prow, grow)) in p.chunks(k).zip(g.chunks(k)).enumerate() {
                            let dot: f64 =
                                prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                            for ki in 0..k {
                                gx[row * k + ki] += prow[ki] * (grow[ki] - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if self.node(logits).requires_grad {
                        let k = self.node(logits).shape[1];
                        let b = self.node(logits).shape[0] as f64;
                        let gl = self.grad_buf(logits);
                        for (bi, (prow, trow)) in
                            probs.chunks(k).zip(targets.chunks(k)).enumerate()
                        {
                            let tsum: f64 = trow.iter().sum();
                            for ki in 0..k {
                                gl[bi * k + ki] += g[0] * (prow[ki] * tsum - trow[ki]) / b;
                            }
                        }
                    }
                }
                Op::MseRows { pred, targets } => {
                    if self.node(pred).requires_grad {
                        let b = self.node(pred).shape[0] as f64;
                        let pv = self.node(pred).value.clone();
                        let gp = self.grad_buf(pred);
                        for ((gi, &p), &t) in gp.iter_mut().zip(&pv).zip(&targets) {
                            *gi += g[0] * 2.0 * (p - t) / b;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(&mut self, x: Var, w: Var, bias: Var, out: usize, g: &[f64]) {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        let so = self.nodes[out].shape.clone();
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (so[2], so[3]);
        if self.node(x).requires_grad {
            let wv = self.node(w).value.clone();
            let gx = self.grad_buf(x);
            for bi in 0..b {
                for fi in 0..f {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[((bi * f + fi) * oh + i) * ow + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..c {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        gx[((bi * c + ci) * h + i + u) * wd + j + v] +=
                                            gv * wv[((fi * c + ci) * kh + u) * kw + v];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.node(w).requires_grad {
            let xv = self.node(x).value.clone();
            let gw = self.grad_buf(w);
            for bi in 0..b {
                for fi in 0..f {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[((bi * f + fi) * oh + i) * ow + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..c {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        gw[((fi * c + ci) * kh + u) * kw + v] +=
                                            gv * xv[((bi * c + ci) * h + i + u) * wd + j + v];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.node(bias).requires_grad {
            let gb = self.grad_buf(bias);
            for bi in 0..b {
                for fi in 0..f {
                    for i in 0..oh {
                        for j in 0..ow {
                            gb[fi] += g[((bi * f + fi) * oh + i) * ow + j];
                        }
                    }
                }
            }
        }
    }

    fn accumulate_scaled(&mut self, v: Var, g: &[f64], c: f64) {
        if self.node(v).requires_grad {
            let gv = self.grad_buf(v);
            for (gi, &u) in gv.iter_mut().zip(g) {
                *gi += c * u;
            }
        }
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n])
    }
}

fn validate_target_rows(context: &str, targets: &Tensor) -> Result<()> {
    let k = *targets.shape().last().unwrap();
    for (i, row) in targets.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::contract(
                context,
                format!("target row {i} is not a probability vector (sum {sum})"),
            ));
        }
    }
    Ok(())
}

/// Cross-entropy of logits against target distributions, without a tape.
pub fn cross_entropy_value(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss)[0])
}

/// Mean squared row distance, without a tape.
pub fn mse_value(pred: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let loss = tape.mse_rows(p, targets)?;
    Ok(tape.value(loss)[0])
}
